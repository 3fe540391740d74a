#![allow(dead_code)]

//! Helpers shared by the integration suites. The finite-difference gradient
//! is the independent oracle for every derivative check in here; it only
//! calls the function under test as a black box.

use fedunfold::data::{partition, synth_blobs, Dataset, PartitionScheme, PartitionSpec};
use fedunfold::fedsim::{Algorithm, ClientProfile, FedConfig};
use fedunfold::model::LossKind;
use fedunfold::unfolding::{GradMode, MetaConfig, MetaLossPoint};

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(1e-6))
        .fold(0.0, f64::max)
}

pub fn fed_config(rounds: usize, lr: f64, batch_size: usize, seed: u64) -> FedConfig {
    FedConfig {
        rounds,
        lr,
        batch_size,
        algorithm: Algorithm::FedAvg,
        loss: LossKind::Mse,
        avector: Default::default(),
        tau_eff: Default::default(),
        renormalize_on_dropout: false,
        parallel_clients: false,
        seed,
    }
}

pub fn meta_config(fed: FedConfig, iterations: usize, lr: f64, seed: u64) -> MetaConfig {
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

pub fn uniform_profiles(datasets: &[Dataset], epochs: usize) -> Vec<ClientProfile> {
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

/// Balanced IID split of a two-class blob pool.
pub fn iid_blob_clients(
    clients: usize,
    classes: usize,
    dims: usize,
    per_class: usize,
    seed: u64,
) -> Vec<Dataset> {
    let pool = synth_blobs(classes, dims, per_class, 0.1, seed).unwrap();
    partition(
        &pool,
        &PartitionSpec {
            scheme: PartitionScheme::IidBalanced { clients },
            seed,
        },
    )
    .unwrap()
}

/// Quantity-skew split of a blob pool into the given sizes.
pub fn skewed_blob_clients(
    sizes: &[usize],
    classes: usize,
    dims: usize,
    per_class: usize,
    spread: f64,
    data_seed: u64,
    part_seed: u64,
) -> Vec<Dataset> {
    let pool = synth_blobs(classes, dims, per_class, spread, data_seed).unwrap();
    partition(
        &pool,
        &PartitionSpec {
            scheme: PartitionScheme::QuantitySkew {
                sizes: sizes.to_vec(),
            },
            seed: part_seed,
        },
    )
    .unwrap()
}
