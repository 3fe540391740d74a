//! Aggregation-weight strategies: static data-proportional weights, loss
//! reweighting (DR), gradient-angle weighting (FedAdp), accuracy/frequency
//! weighting (FedFa), and lookup into a learned schedule.

use std::f64::consts::PI;
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::unfolding::WeightSchedule;

const SIMPLEX_TOL: f64 = 1e-9;

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("empty weight vector".into()));
        }
        if values.iter().any(|&w| !w.is_finite()) {
            return Err(Error::NonFinite("weight vector".into()));
        }
        if values.iter().any(|&w| w < -SIMPLEX_TOL) {
            return Err(Error::Config(format!("negative weight in {values:?}")));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Config(format!("weights sum to {total}, not 1")));
        }
        Ok(Weights(values))
    }

    pub fn uniform(k: usize) -> Self {
        Weights(vec![1.0 / k as f64; k])
    }

    /// Normalize nonnegative scores into weights.
    pub fn normalized(scores: Vec<f64>) -> Result<Self> {
        let total: f64 = scores.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(Error::Config("weight scores sum to zero".into()));
        }
        Weights::new(scores.into_iter().map(|s| s / total).collect())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Weights {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Data-proportional weights N_k / N, shared by FedAvg and FedNova.
pub fn weights_static_avg(sample_counts: &[usize]) -> Result<Weights> {
    if sample_counts.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    if sample_counts.contains(&0) {
        return Err(Error::Config("every client needs at least one sample".into()));
    }
    Weights::normalized(sample_counts.iter().map(|&n| n as f64).collect())
}

/// Loss reweighting: proportional to (N_k/N) * loss^(q+1).
pub fn weights_dr(sample_counts: &[usize], losses: &[f64], q: f64) -> Result<Weights> {
    if sample_counts.len() != losses.len() {
        return Err(Error::Shape("dr: counts vs losses".into()));
    }
    if q < 0.0 {
        return Err(Error::Config("dr exponent q must be nonnegative".into()));
    }
    if losses.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(Error::Config("dr losses must be finite and nonnegative".into()));
    }
    let n: f64 = sample_counts.iter().map(|&c| c as f64).sum();
    let scores: Vec<f64> = sample_counts
        .iter()
        .zip(losses)
        .map(|(&c, &l)| (c as f64 / n) * l.powf(q + 1.0))
        .collect();
    Weights::normalized(scores).map_err(|_| Error::Config("dr: every weighted loss is zero".into()))
}

/// Angle-to-weight map used by FedAdp.
pub fn fedadp_gompertz(phi: f64, beta: f64) -> f64 {
    beta * (1.0 - (-(-beta * (phi - 1.0)).exp()).exp())
}

/// Smoothed per-client angles carried across rounds.
#[derive(Debug, Clone, Default)]
pub struct AdpState {
    pub smoothed: Vec<f64>,
}

pub struct AdpOutcome {
    pub weights: Weights,
    pub state: AdpState,
    /// Clients whose gradient (or the global gradient) had zero norm; their
    /// angle was set to the neutral pi/2.
    pub degenerate: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Client gradients combined data-proportionally into the global gradient.
pub fn global_gradient(sample_counts: &[usize], grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    if sample_counts.len() != grads.len() || grads.is_empty() {
        return Err(Error::Shape("global gradient inputs".into()));
    }
    let n: f64 = sample_counts.iter().map(|&c| c as f64).sum();
    let dim = grads[0].len();
    let mut out = vec![0.0; dim];
    for (&c, g) in sample_counts.iter().zip(grads) {
        if g.len() != dim {
            return Err(Error::Shape("client gradient dimensions differ".into()));
        }
        let w = c as f64 / n;
        for (o, gi) in out.iter_mut().zip(g) {
            *o += w * gi;
        }
    }
    Ok(out)
}

/// Gradient-angle weighting. Angles between each client's accumulated
/// gradient and the global gradient are smoothed over rounds and mapped
/// through the Gompertz-style curve; weights are proportional to
/// N_k * exp(h(smoothed angle)).
pub fn weights_fedadp(
    sample_counts: &[usize],
    client_grads: &[Vec<f64>],
    global_grad: &[f64],
    state: &AdpState,
    round: usize,
    beta: f64,
) -> Result<AdpOutcome> {
    let k = sample_counts.len();
    if client_grads.len() != k {
        return Err(Error::Shape("fedadp: counts vs gradients".into()));
    }
    if beta <= 0.0 {
        return Err(Error::Config("fedadp beta must be positive".into()));
    }
    if !state.smoothed.is_empty() && state.smoothed.len() != k {
        return Err(Error::Shape("fedadp state size".into()));
    }

    let gnorm = norm(global_grad);
    let mut degenerate = Vec::new();
    let mut smoothed = Vec::with_capacity(k);
    for (idx, g) in client_grads.iter().enumerate() {
        let knorm = norm(g);
        let phi = if gnorm == 0.0 || knorm == 0.0 {
            degenerate.push(idx);
            PI / 2.0
        } else {
            let cos = (dot(global_grad, g) / (gnorm * knorm)).clamp(-1.0, 1.0);
            cos.acos()
        };
        let value = if round == 0 || state.smoothed.is_empty() {
            phi
        } else {
            let t = round as f64;
            (t / (t + 1.0)) * state.smoothed[idx] + phi / (t + 1.0)
        };
        smoothed.push(value);
    }

    let scores: Vec<f64> = sample_counts
        .iter()
        .zip(&smoothed)
        .map(|(&n, &phi)| n as f64 * fedadp_gompertz(phi, beta).exp())
        .collect();
    Ok(AdpOutcome {
        weights: Weights::normalized(scores)?,
        state: AdpState { smoothed },
        degenerate,
    })
}

/// Cumulative participation counts for FedFa.
#[derive(Debug, Clone, Default)]
pub struct FaState {
    pub participation: Vec<u64>,
}

/// Normalized -log2 shares with the argument clamped below by `eps`; a
/// degenerate denominator falls back to the uniform share.
fn log_share(values: &[f64], eps: f64) -> Vec<f64> {
    let k = values.len();
    let total: f64 = values.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return vec![1.0 / k as f64; k];
    }
    let terms: Vec<f64> = values
        .iter()
        .map(|v| -((v / total).max(eps)).log2())
        .collect();
    let denom: f64 = terms.iter().sum();
    if denom.is_nan() || denom <= 0.0 {
        return vec![1.0 / k as f64; k];
    }
    terms.into_iter().map(|t| t / denom).collect()
}

/// Accuracy/participation weighting. Participation counts are bumped for
/// the clients available this round before the weights are formed.
pub fn weights_fedfa(
    train_accuracies: &[f64],
    available: &[bool],
    state: &FaState,
    gamma: f64,
    eps: f64,
) -> Result<(Weights, FaState)> {
    let k = train_accuracies.len();
    if available.len() != k {
        return Err(Error::Shape("fedfa: accuracies vs availability".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config("fedfa gamma must be in [0, 1]".into()));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config("fedfa eps must be positive".into()));
    }
    if train_accuracies.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
        return Err(Error::Config("fedfa accuracies must be in [0, 1]".into()));
    }
    if !state.participation.is_empty() && state.participation.len() != k {
        return Err(Error::Shape("fedfa state size".into()));
    }

    let mut participation = if state.participation.is_empty() {
        vec![0u64; k]
    } else {
        state.participation.clone()
    };
    for (count, &avail) in participation.iter_mut().zip(available) {
        *count += u64::from(avail);
    }

    let accuracy_share = log_share(train_accuracies, eps);
    let freq: Vec<f64> = participation.iter().map(|&c| c as f64).collect();
    let freq_total: f64 = freq.iter().sum();
    let frequency_share = if freq_total > 0.0 {
        // -log2(1 - F_k / total), clamped, then normalized.
        let complements: Vec<f64> = freq.iter().map(|f| 1.0 - f / freq_total).collect();
        let terms: Vec<f64> = complements.iter().map(|c| -(c.max(eps)).log2()).collect();
        let denom: f64 = terms.iter().sum();
        if denom > 0.0 {
            terms.into_iter().map(|t| t / denom).collect()
        } else {
            vec![1.0 / k as f64; k]
        }
    } else {
        vec![1.0 / k as f64; k]
    };

    let combined: Vec<f64> = accuracy_share
        .iter()
        .zip(&frequency_share)
        .map(|(m, e)| gamma * m + (1.0 - gamma) * e)
        .collect();
    Ok((Weights::new(combined)?, FaState { participation }))
}

/// Row lookup into a learned schedule.
pub fn weights_duw(schedule: &WeightSchedule, round: usize) -> Result<Weights> {
    schedule.weights_row(round)
}

/// A weighting strategy plus whatever state it carries between rounds.
#[derive(Debug, Clone)]
pub enum Strategy {
    StaticAvg,
    Dr { q: f64 },
    FedAdp { beta: f64, state: AdpState },
    FedFa { gamma: f64, epsilon: f64, state: FaState },
    Duw { schedule: WeightSchedule },
}

/// Everything the run loop exposes to a strategy each round.
pub struct StrategyInputs<'a> {
    pub round: usize,
    pub sample_counts: &'a [usize],
    /// Loss of the shared global parameters on each client's full local set.
    pub global_losses: &'a [f64],
    /// Sum of the minibatch gradients each client applied this round.
    pub accumulated_grads: &'a [Vec<f64>],
    /// Post-update training accuracy on each client's local set.
    pub train_accuracies: &'a [f64],
    pub available: &'a [bool],
}

impl Strategy {
    pub fn weights_for_round(&mut self, inputs: &StrategyInputs) -> Result<Weights> {
        match self {
            Strategy::StaticAvg => weights_static_avg(inputs.sample_counts),
            Strategy::Dr { q } => weights_dr(inputs.sample_counts, inputs.global_losses, *q),
            Strategy::FedAdp { beta, state } => {
                let global = global_gradient(inputs.sample_counts, inputs.accumulated_grads)?;
                let outcome = weights_fedadp(
                    inputs.sample_counts,
                    inputs.accumulated_grads,
                    &global,
                    state,
                    inputs.round,
                    *beta,
                )?;
                if !outcome.degenerate.is_empty() {
                    eprintln!(
                        "warning: round {}: zero-norm gradient for clients {:?}, using neutral angle",
                        inputs.round, outcome.degenerate
                    );
                }
                *state = outcome.state;
                Ok(outcome.weights)
            }
            Strategy::FedFa { gamma, epsilon, state } => {
                let (weights, next) = weights_fedfa(
                    inputs.train_accuracies,
                    inputs.available,
                    state,
                    *gamma,
                    *epsilon,
                )?;
                *state = next;
                Ok(weights)
            }
            Strategy::Duw { schedule } => weights_duw(schedule, inputs.round),
        }
    }
}
