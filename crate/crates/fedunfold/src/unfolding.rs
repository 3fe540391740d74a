//! Meta-training of the per-round aggregation weights.
//!
//! The full T-round federated process, client SGD included, is built as one
//! differentiable graph: round weights come from row-wise softmax over
//! trainable logits, client updates chain gradient-graph SGD steps, and the
//! aggregated parameters feed the next round. One reverse sweep then yields
//! the gradient of the accumulated client losses with respect to every
//! logit, and Adam updates the schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fedsim::{
    self, Algorithm, ClientProfile, FedConfig, RoundRecord, RoundTrace,
};
use crate::linalg::{self, Array};
use crate::model::{self, LossKind};
use crate::rng::{self, purpose};
use crate::weighting::Weights;

/// T x K schedule of aggregation weights, parameterized by logits so every
/// derived row sits strictly inside the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSchedule {
    logits: Vec<Vec<f64>>,
}

impl WeightSchedule {
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Result<Self> {
        if logits.is_empty() || logits[0].is_empty() {
            return Err(Error::Config("schedule needs at least one round and client".into()));
        }
        let clients = logits[0].len();
        for row in &logits {
            if row.len() != clients {
                return Err(Error::Shape("schedule rows differ in length".into()));
            }
            if row.iter().any(|l| !l.is_finite()) {
                return Err(Error::NonFinite("schedule logits".into()));
            }
        }
        Ok(WeightSchedule { logits })
    }

    pub fn rounds(&self) -> usize {
        self.logits.len()
    }

    pub fn clients(&self) -> usize {
        self.logits[0].len()
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn weights_row(&self, round: usize) -> Result<Weights> {
        let row = self.logits.get(round).ok_or_else(|| {
            Error::Config(format!(
                "round {round} outside schedule of {} rounds",
                self.rounds()
            ))
        })?;
        logits_to_weights(row)
    }

    /// Derived weights for every round.
    pub fn weights_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.rounds())
            .map(|t| self.weights_row(t).expect("stored logits are finite").into_vec())
            .collect()
    }

    pub fn apply_delta(&mut self, delta: &[Vec<f64>]) -> Result<()> {
        if delta.len() != self.rounds() || delta.iter().any(|d| d.len() != self.clients()) {
            return Err(Error::Shape("schedule delta shape".into()));
        }
        for (row, d) in self.logits.iter_mut().zip(delta) {
            for (l, dv) in row.iter_mut().zip(d) {
                *l += dv;
            }
        }
        Ok(())
    }
}

/// Row softmax with max subtraction.
pub fn logits_to_weights(row: &[f64]) -> Result<Weights> {
    if row.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("weight logits".into()));
    }
    let soft = linalg::softmax_rows(&Array::row_vec(row.to_vec()), None)?;
    Weights::new(soft.into_data())
}

/// Schedule whose every row reproduces the data-proportional weights:
/// logits ln(N_k / N).
pub fn schedule_init(rounds: usize, sample_counts: &[usize]) -> Result<WeightSchedule> {
    if rounds == 0 {
        return Err(Error::Config("schedule needs at least one round".into()));
    }
    if sample_counts.is_empty() || sample_counts.contains(&0) {
        return Err(Error::Config("sample counts must be positive".into()));
    }
    let total: f64 = sample_counts.iter().map(|&n| n as f64).sum();
    let row: Vec<f64> = sample_counts
        .iter()
        .map(|&n| (n as f64 / total).ln())
        .collect();
    WeightSchedule::from_logits(vec![row; rounds])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Exact differentiation through every local SGD step.
    #[default]
    Unrolled,
    /// Detach local gradients; cheaper, ignores curvature paths.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaLossPoint {
    /// Score each client's own post-update parameters. The final round's
    /// weights then sit behind no loss term, so pair this with
    /// `include_final_global_loss`.
    PostLocal,
    /// Score the aggregated parameters of each round.
    #[default]
    PostAggregate,
}

#[derive(Debug, Clone)]
pub struct MetaConfig {
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_mode: GradMode,
    pub meta_loss_point: MetaLossPoint,
    pub include_final_global_loss: bool,
    pub fed: FedConfig,
    pub seed: u64,
}

impl MetaConfig {
    pub fn with_defaults(fed: FedConfig, iterations: usize, lr: f64, seed: u64) -> Self {
        MetaConfig {
            iterations,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_mode: GradMode::Unrolled,
            meta_loss_point: MetaLossPoint::PostAggregate,
            include_final_global_loss: false,
            fed,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fed.validate()?;
        let bad_rate = self.lr.is_nan() || self.lr <= 0.0;
        let bad_beta = !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2);
        if bad_rate || bad_beta || self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("meta optimizer hyperparameters out of range".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments, shaped like the logits.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u32,
}

impl AdamState {
    pub fn new(rounds: usize, clients: usize) -> Self {
        AdamState {
            m: vec![vec![0.0; clients]; rounds],
            v: vec![vec![0.0; clients]; rounds],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }
}

/// One Adam update; returns the additive logits delta.
pub fn adam_step(
    state: &mut AdamState,
    grads: &[Vec<f64>],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<Vec<Vec<f64>>> {
    if grads.len() != state.m.len() || grads.iter().zip(&state.m).any(|(g, m)| g.len() != m.len()) {
        return Err(Error::Shape("adam gradient shape".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let mut delta = Vec::with_capacity(grads.len());
    for (t, row) in grads.iter().enumerate() {
        let mut drow = Vec::with_capacity(row.len());
        for (k, &g) in row.iter().enumerate() {
            let m = &mut state.m[t][k];
            let v = &mut state.v[t][k];
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            drow.push(-lr * m_hat / (v_hat.sqrt() + eps));
        }
        delta.push(drow);
    }
    Ok(delta)
}

/// The unrolled graph for one meta-iteration.
pub struct UnrolledLoss {
    pub tape: Tape,
    /// Scalar node holding the accumulated meta-loss.
    pub loss: NodeId,
    /// One trainable 1xK logits leaf per round.
    pub logit_nodes: Vec<NodeId>,
    pub trace: RoundTrace,
}

/// Build the full T-round process as one graph: trainable logits, per-round
/// softmax, in-graph client updates, weighted aggregation, and accumulated
/// per-client losses (squared error on each client's full local set).
///
/// Initialization, availability, and minibatch order are all redrawn per
/// meta-iteration, so the schedule is trained against the distribution of
/// runs rather than one realization; anything else lets the optimizer
/// exploit the idiosyncrasies of a single fixed batch sequence.
pub fn unroll_meta_loss(
    schedule: &WeightSchedule,
    meta: &MetaConfig,
    profiles: &[ClientProfile],
    datasets: &[Dataset],
    layer_sizes: &[usize],
    meta_iter: u64,
) -> Result<UnrolledLoss> {
    meta.validate()?;
    let fed = &meta.fed;
    let rounds = fed.rounds;
    let k = datasets.len();
    if k == 0 || profiles.len() != k {
        return Err(Error::Config("profiles and client datasets differ".into()));
    }
    if schedule.rounds() != rounds || schedule.clients() != k {
        return Err(Error::Shape(format!(
            "schedule is {}x{}, run wants {rounds}x{k}",
            schedule.rounds(),
            schedule.clients()
        )));
    }
    for (i, (p, d)) in profiles.iter().zip(datasets).enumerate() {
        p.validate()?;
        if d.is_empty() || p.samples != d.len() {
            return Err(Error::Config(format!("client {i} dataset/profile mismatch")));
        }
    }

    let mut tape = Tape::new();
    let logit_nodes: Vec<NodeId> = schedule
        .logits()
        .iter()
        .map(|row| tape.leaf(Array::row_vec(row.clone())))
        .collect();

    let init = model::mlp_init(layer_sizes, rng::mix(meta.seed, &[purpose::META_INIT, meta_iter]))?;
    let mut w_current = tape.constant(Array::col_vec(init.theta));

    let full_nodes: Vec<(NodeId, NodeId)> = datasets
        .iter()
        .map(|d| {
            let b = d.full_batch();
            (tape.constant(b.inputs), tape.constant(b.targets))
        })
        .collect();

    let mut meta_terms = Vec::with_capacity(rounds * k);
    let mut trace = RoundTrace::default();

    #[allow(clippy::needless_range_loop)]
    for t in 0..rounds {
        let mut avail_stream =
            rng::stream(meta.seed, &[purpose::AVAILABILITY, t as u64, meta_iter]);
        let available = fedsim::sample_availability(profiles, &mut avail_stream);
        let any_received = available.iter().any(|&b| b);

        let mut client_params = Vec::with_capacity(k);
        for kk in 0..k {
            let mut stream = rng::stream(
                fed.seed,
                &[purpose::MINIBATCH, kk as u64, t as u64, meta_iter],
            );
            let n = datasets[kk].len();
            let (plan, scales): (Vec<Vec<usize>>, Vec<f64>) = match fed.algorithm {
                Algorithm::FedAvg => {
                    let plan =
                        fedsim::epoch_minibatch_plan(n, fed.batch_size, profiles[kk].epochs, &mut stream);
                    let scales = vec![fed.lr; plan.len()];
                    (plan, scales)
                }
                Algorithm::FedNova => {
                    let tau = fedsim::tau_for_round(&profiles[kk], t, n, fed.batch_size);
                    let a = fedsim::a_vector(&fed.avector, tau)?;
                    let tau_eff = fedsim::tau_eff_round(fed, profiles, datasets, t);
                    let plan = fedsim::nova_minibatch_plan(n, fed.batch_size, tau, &mut stream);
                    let l1 = a.l1();
                    let scales = a
                        .entries()
                        .iter()
                        .map(|ai| fed.lr * (tau_eff / l1) * ai)
                        .collect();
                    (plan, scales)
                }
            };
            let mut cur = w_current;
            for (indices, scale) in plan.iter().zip(scales) {
                let batch = datasets[kk].batch(indices);
                let bx = tape.constant(batch.inputs);
                let by = tape.constant(batch.targets);
                let mut g =
                    model::loss_grad_graph(&mut tape, cur, layer_sizes, bx, by, fed.loss)?;
                if meta.grad_mode == GradMode::FirstOrder {
                    g = tape.stop_gradient(g)?;
                }
                let step = tape.scale_const(g, scale)?;
                cur = tape.sub(cur, step)?;
            }
            client_params.push(cur);
        }

        let (w_next, weights_used) = if fed.renormalize_on_dropout && !any_received {
            // Nothing arrived: the globals carry over and no weight applies.
            let row = linalg::softmax_rows(&Array::row_vec(schedule.logits()[t].clone()), None)?;
            (w_current, row.into_data())
        } else {
            let mask = if fed.renormalize_on_dropout && available.iter().any(|&b| !b) {
                Some(available.clone())
            } else {
                None
            };
            let weights_node = tape.softmax_row(logit_nodes[t], mask)?;
            let contributions: Vec<NodeId> = if fed.renormalize_on_dropout {
                client_params.clone()
            } else {
                (0..k)
                    .map(|kk| if available[kk] { client_params[kk] } else { w_current })
                    .collect()
            };
            let w_next = tape.weighted_sum(weights_node, &contributions)?;
            (w_next, tape.value(weights_node).data().to_vec())
        };

        let mut losses = Vec::with_capacity(k);
        for kk in 0..k {
            let point = match meta.meta_loss_point {
                MetaLossPoint::PostLocal => client_params[kk],
                MetaLossPoint::PostAggregate => w_next,
            };
            let term = model::loss_graph(
                &mut tape,
                point,
                layer_sizes,
                full_nodes[kk].0,
                full_nodes[kk].1,
                LossKind::Mse,
            )?;
            losses.push(tape.value(term).scalar_value());
            meta_terms.push(term);
        }

        trace.rounds.push(RoundRecord {
            weights: weights_used,
            available,
            losses,
            accuracy: None,
            global_params: tape.value(w_next).data().to_vec(),
        });
        w_current = w_next;
    }

    if meta.meta_loss_point == MetaLossPoint::PostLocal && meta.include_final_global_loss {
        for &(bx, by) in &full_nodes {
            let term = model::loss_graph(
                &mut tape,
                w_current,
                layer_sizes,
                bx,
                by,
                LossKind::Mse,
            )?;
            meta_terms.push(term);
        }
    }

    let mut loss = meta_terms[0];
    for &term in &meta_terms[1..] {
        loss = tape.add(loss, term)?;
    }

    Ok(UnrolledLoss {
        tape,
        loss,
        logit_nodes,
        trace,
    })
}

/// The meta-training loop: M iterations of fresh model initialization,
/// unrolled forward, reverse sweep, and an Adam step on the logits. Returns
/// the learned schedule and the meta-loss history.
pub fn duw_train(
    meta: &MetaConfig,
    profiles: &[ClientProfile],
    datasets: &[Dataset],
    layer_sizes: &[usize],
) -> Result<(WeightSchedule, Vec<f64>)> {
    meta.validate()?;
    let counts: Vec<usize> = datasets.iter().map(Dataset::len).collect();
    let mut schedule = schedule_init(meta.fed.rounds, &counts)?;
    let mut adam = AdamState::new(schedule.rounds(), schedule.clients());
    let mut history = Vec::with_capacity(meta.iterations);

    for m in 0..meta.iterations {
        let unrolled = unroll_meta_loss(&schedule, meta, profiles, datasets, layer_sizes, m as u64)
            .map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("meta-iteration {m}: {msg}"))
                }
                other => other,
            })?;
        let loss = unrolled.tape.value(unrolled.loss).scalar_value();
        let grad_map = unrolled.tape.backward(unrolled.loss)?;
        let grads: Vec<Vec<f64>> = unrolled
            .logit_nodes
            .iter()
            .map(|&id| {
                grad_map
                    .adjoint(id)
                    .expect("logit leaves always receive adjoints")
                    .data()
                    .to_vec()
            })
            .collect();
        let delta = adam_step(&mut adam, &grads, meta.lr, meta.beta1, meta.beta2, meta.adam_eps)?;
        schedule.apply_delta(&delta)?;
        if schedule.logits().iter().flatten().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!(
                "meta-iteration {m}: logits diverged (meta-loss {loss})"
            )));
        }
        history.push(loss);
    }
    Ok((schedule, history))
}

/// Schedule rows in the `round,client,logit,weight` layout. Logits print in
/// shortest round-trip form, so reading the file back is lossless.
pub fn schedule_csv(schedule: &WeightSchedule) -> String {
    let mut out = String::from("round,client,logit,weight\n");
    for (t, row) in schedule.logits().iter().enumerate() {
        let weights = logits_to_weights(row).expect("stored logits are finite");
        for (k, (&logit, &weight)) in row.iter().zip(weights.iter()).enumerate() {
            out.push_str(&format!("{t},{k},{logit},{weight}\n"));
        }
    }
    out
}

pub fn parse_schedule_csv(text: &str) -> Result<WeightSchedule> {
    let mut lines = text.lines();
    match lines.next() {
        Some("round,client,logit,weight") => {}
        other => {
            return Err(Error::Data(format!(
                "schedule csv header missing, found {other:?}"
            )))
        }
    }
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!(
                "schedule csv line {}: expected 4 fields",
                lineno + 2
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("schedule csv line {}: bad {what}", lineno + 2)))
        };
        let round = parse(fields[0], "round")? as usize;
        let client = parse(fields[1], "client")? as usize;
        let logit = parse(fields[2], "logit")?;
        cells.push((round, client, logit));
    }
    if cells.is_empty() {
        return Err(Error::Data("schedule csv has no rows".into()));
    }
    let rounds = cells.iter().map(|c| c.0).max().unwrap() + 1;
    let clients = cells.iter().map(|c| c.1).max().unwrap() + 1;
    if cells.len() != rounds * clients {
        return Err(Error::Data(format!(
            "schedule csv is not dense: {} cells for {rounds}x{clients}",
            cells.len()
        )));
    }
    let mut logits = vec![vec![f64::NAN; clients]; rounds];
    for (t, k, logit) in cells {
        logits[t][k] = logit;
    }
    WeightSchedule::from_logits(logits)
}
