//! Post-hoc diagnostics: test accuracy, the per-client variance of learned
//! weights across rounds, the coefficients that aggregate weight magnitudes
//! and a-vector norms in the convergence bound, and log-log slope fits of
//! variance against the round count.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fedsim::AVector;
use crate::model::{mlp_forward, ModelParams};

/// Per-client variance of aggregation weights over rounds.
#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub per_client: Vec<f64>,
    pub mean: f64,
    pub rounds: usize,
}

/// Variance of each weight column across the rows of a T x K matrix:
/// (1/T) sum_t (w[t][k] - mean_t w[t][k])^2, then the mean over clients.
pub fn weight_variance(weights: &[Vec<f64>]) -> Result<VarianceReport> {
    let rounds = weights.len();
    if rounds == 0 {
        return Err(Error::Config("weight variance of an empty schedule".into()));
    }
    let clients = weights[0].len();
    if clients == 0 || weights.iter().any(|row| row.len() != clients) {
        return Err(Error::Shape("weight rows must share a client count".into()));
    }
    let t = rounds as f64;
    let mut per_client = Vec::with_capacity(clients);
    for k in 0..clients {
        // Shift by the first entry so constant columns come out exactly zero.
        let base = weights[0][k];
        let mean: f64 = weights.iter().map(|row| row[k] - base).sum::<f64>() / t;
        let var: f64 = weights
            .iter()
            .map(|row| (row[k] - base - mean).powi(2))
            .sum::<f64>()
            / t;
        per_client.push(var);
    }
    let mean = per_client.iter().sum::<f64>() / clients as f64;
    Ok(VarianceReport {
        per_client,
        mean,
        rounds,
    })
}

#[derive(Debug, Clone)]
pub struct CoefficientReport {
    pub a_tilde: f64,
    pub b_tilde: f64,
    pub c_tilde: f64,
    /// Mean step count across clients, per round.
    pub tau_bar: Vec<f64>,
    /// Mean of tau_bar over rounds.
    pub tau_tilde: f64,
    /// Mean over rounds of the data-weighted effective step count.
    pub tau_eff: f64,
}

/// Aggregate coefficients of the convergence bound from the per-round
/// weights, the per-(round, client) a-vectors, and the static
/// data-proportional weights.
pub fn bound_coefficients(
    weights: &[Vec<f64>],
    a_vectors: &[Vec<AVector>],
    static_weights: &[f64],
) -> Result<CoefficientReport> {
    let rounds = weights.len();
    if rounds == 0 || a_vectors.len() != rounds {
        return Err(Error::Shape("weights vs a-vectors round counts".into()));
    }
    let clients = static_weights.len();
    if clients == 0 {
        return Err(Error::Shape("no clients".into()));
    }
    for (row, avs) in weights.iter().zip(a_vectors) {
        if row.len() != clients || avs.len() != clients {
            return Err(Error::Shape("per-round client counts differ".into()));
        }
    }

    let t = rounds as f64;
    let k = clients as f64;
    let mut a_tilde = 0.0;
    let mut b_tilde = 0.0;
    let mut c_tilde = 0.0;
    let mut tau_bar = Vec::with_capacity(rounds);
    let mut tau_eff = 0.0;
    for (row, avs) in weights.iter().zip(a_vectors) {
        let mut a_round = 0.0;
        let mut b_round = 0.0;
        let mut c_round = f64::NEG_INFINITY;
        let mut tau_sum = 0.0;
        let mut tau_eff_round = 0.0;
        for ((&theta_t, av), &theta_static) in row.iter().zip(avs).zip(static_weights) {
            let l1 = av.l1();
            let l2sq = av.l2_squared();
            let last = av.last();
            a_round += theta_t * theta_t * l2sq / (l1 * l1);
            // The summand is summed over clients against the static weights;
            // that is the only reading under which the total is scalar.
            b_round += theta_static * (l2sq - last * last);
            c_round = c_round.max(l1 * (l1 - last));
            tau_sum += av.len() as f64;
            tau_eff_round += theta_static * av.len() as f64;
        }
        a_tilde += k * a_round;
        b_tilde += b_round;
        c_tilde += c_round;
        tau_bar.push(tau_sum / k);
        tau_eff += tau_eff_round;
    }
    let tau_tilde = tau_bar.iter().sum::<f64>() / t;
    Ok(CoefficientReport {
        a_tilde: a_tilde / t,
        b_tilde: b_tilde / t,
        c_tilde: c_tilde / t,
        tau_bar,
        tau_tilde,
        tau_eff: tau_eff / t,
    })
}

/// Fraction of test samples whose argmax prediction matches the label.
/// Ties break toward the lowest class index.
pub fn evaluate_accuracy(params: &ModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("accuracy on an empty test set".into()));
    }
    let out = mlp_forward(params, &test.inputs)?;
    if out.cols() != test.classes {
        return Err(Error::Shape(format!(
            "{} model outputs vs {} classes",
            out.cols(),
            test.classes
        )));
    }
    let mut hits = 0usize;
    for (r, &label) in test.labels.iter().enumerate() {
        let mut best = 0;
        let mut best_val = out.get(r, 0);
        for c in 1..out.cols() {
            let v = out.get(r, c);
            if v > best_val {
                best = c;
                best_val = v;
            }
        }
        hits += usize::from(best == label);
    }
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Debug, Clone)]
pub struct SlopeReport {
    pub slope: f64,
    /// Round counts whose variance was nonpositive and had to be excluded.
    pub excluded: Vec<usize>,
    pub points_used: usize,
}

/// Least-squares slope of log(variance) against log(rounds).
pub fn variance_slope(points: &[(usize, f64)]) -> Result<SlopeReport> {
    if points.len() < 3 {
        return Err(Error::Config(format!(
            "slope fit needs at least 3 grid points, got {}",
            points.len()
        )));
    }
    let mut excluded = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(rounds, variance) in points {
        if variance > 0.0 {
            xs.push((rounds as f64).ln());
            ys.push(variance.ln());
        } else {
            excluded.push(rounds);
        }
    }
    if xs.len() < 2 {
        return Err(Error::Config(format!(
            "slope fit impossible: variances at T = {excluded:?} are zero"
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        return Err(Error::Config("slope fit needs at least two distinct T values".into()));
    }
    Ok(SlopeReport {
        slope: num / den,
        excluded,
        points_used: xs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsim::{a_vector, AVectorKind};
    use crate::linalg::Array;
    use crate::model::{mlp_init, param_count};
    use crate::weighting::weights_static_avg;

    #[test]
    fn constant_schedule_has_zero_variance() {
        let rows = vec![vec![0.3, 0.7]; 6];
        let report = weight_variance(&rows).unwrap();
        assert_eq!(report.per_client, vec![0.0, 0.0]);
        assert_eq!(report.mean, 0.0);
    }

    #[test]
    fn single_client_schedule_has_zero_variance() {
        let rows = vec![vec![1.0]; 4];
        assert_eq!(weight_variance(&rows).unwrap().mean, 0.0);
    }

    #[test]
    fn two_round_flip_has_variance_quarter() {
        let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let report = weight_variance(&rows).unwrap();
        assert_eq!(report.per_client, vec![0.25, 0.25]);
        assert_eq!(report.mean, 0.25);
    }

    #[test]
    fn uniform_ones_coefficients_close_form() {
        for tau in [1usize, 2, 5, 10] {
            let k = 4;
            let weights = vec![vec![1.0 / k as f64; k]; 3];
            let avs: Vec<Vec<AVector>> = (0..3)
                .map(|_| (0..k).map(|_| a_vector(&AVectorKind::FedAvg, tau).unwrap()).collect())
                .collect();
            let theta = vec![1.0 / k as f64; k];
            let report = bound_coefficients(&weights, &avs, &theta).unwrap();
            let tau_f = tau as f64;
            assert!((report.a_tilde - 1.0 / tau_f).abs() < 1e-12);
            assert!((report.b_tilde - (tau_f - 1.0)).abs() < 1e-12);
            assert!((report.c_tilde - tau_f * (tau_f - 1.0)).abs() < 1e-12);
            assert!((report.tau_tilde - tau_f).abs() < 1e-12);
            assert!((report.tau_eff - tau_f).abs() < 1e-12);
        }
    }

    #[test]
    fn static_schedule_a_tilde_identity() {
        // Frozen data-proportional weights with 1-vectors of length tau:
        // A = K * sum_k (N_k/N)^2 / tau.
        let counts = [30usize, 10, 60];
        let theta = weights_static_avg(&counts).unwrap();
        let tau = 4usize;
        let rows = vec![theta.to_vec(); 5];
        let avs: Vec<Vec<AVector>> = (0..5)
            .map(|_| (0..3).map(|_| a_vector(&AVectorKind::FedAvg, tau).unwrap()).collect())
            .collect();
        let report = bound_coefficients(&rows, &avs, &theta).unwrap();
        let want = 3.0 * theta.iter().map(|w| w * w).sum::<f64>() / tau as f64;
        assert!((report.a_tilde - want).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_scores_one() {
        // One-hot rows fed straight through an identity-ish single layer.
        let mut theta = vec![0.0; param_count(&[3, 3])];
        // Weight matrix = identity.
        theta[0] = 1.0;
        theta[4] = 1.0;
        theta[8] = 1.0;
        let params = ModelParams {
            layer_sizes: vec![3, 3],
            theta,
        };
        let inputs = Array::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let test = Dataset::new(inputs, vec![0, 1, 2], 3).unwrap();
        assert_eq!(evaluate_accuracy(&params, &test).unwrap(), 1.0);
    }

    #[test]
    fn constant_model_scores_one_over_c_on_balanced_data() {
        // All-zero outputs tie everywhere; ties go to class 0.
        let params = ModelParams {
            layer_sizes: vec![2, 4],
            theta: vec![0.0; param_count(&[2, 4])],
        };
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let inputs = Array::zeros(n, 2);
        let test = Dataset::new(inputs, labels, 4).unwrap();
        assert_eq!(evaluate_accuracy(&params, &test).unwrap(), 0.25);
    }

    #[test]
    fn random_model_is_near_chance_on_balanced_data() {
        let params = mlp_init(&[4, 8, 10], 123).unwrap();
        let test = crate::data::synth_blobs(10, 4, 100, 0.3, 5).unwrap();
        let acc = evaluate_accuracy(&params, &test).unwrap();
        assert!((acc - 0.1).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn slope_of_exact_power_laws() {
        let grid = [4usize, 8, 16, 32];
        let inv_t: Vec<(usize, f64)> = grid.iter().map(|&t| (t, 3.0 / t as f64)).collect();
        assert!((variance_slope(&inv_t).unwrap().slope + 1.0).abs() < 1e-6);

        let inv_sqrt: Vec<(usize, f64)> =
            grid.iter().map(|&t| (t, 0.7 / (t as f64).sqrt())).collect();
        assert!((variance_slope(&inv_sqrt).unwrap().slope + 0.5).abs() < 1e-6);

        let constant: Vec<(usize, f64)> = grid.iter().map(|&t| (t, 0.42)).collect();
        assert!(variance_slope(&constant).unwrap().slope.abs() < 1e-9);
    }

    #[test]
    fn slope_rejects_zero_variances_with_context() {
        let points = vec![(4, 0.0), (8, 0.0), (16, 0.0)];
        let err = variance_slope(&points).unwrap_err();
        assert!(err.to_string().contains("zero"), "{err}");
        let mixed = vec![(4, 0.5), (8, 0.0), (16, 0.25), (32, 0.1)];
        let report = variance_slope(&mixed).unwrap();
        assert_eq!(report.excluded, vec![8]);
        assert_eq!(report.points_used, 3);
    }
}
