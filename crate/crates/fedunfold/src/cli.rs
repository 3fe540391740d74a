//! The four commands behind the binary: partition, train-weights, run, and
//! analyze. Every command is a pure function of its config and input files;
//! outputs are written atomically so reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{bound_coefficients, variance_slope, weight_variance};
use crate::config::{build_environment, ExperimentConfig};
use crate::data::histogram_csv;
use crate::error::{Error, Result};
use crate::fedsim::{self, a_vector, AVectorKind, ClientProfile, RunOutput};
use crate::fsutil::atomic_write;
use crate::rng::{self, purpose};
use crate::unfolding::{self, duw_train, parse_schedule_csv, WeightSchedule};
use crate::weighting::weights_static_avg;

/// Context stored next to a trained schedule so analysis can rebuild the
/// per-round a-vectors and static weights without the original config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub rounds: usize,
    pub clients: usize,
    pub config_hash: String,
    pub client_samples: Vec<usize>,
    pub epochs: Vec<usize>,
    pub tau_schedules: Vec<Option<Vec<usize>>>,
    pub batch_size: usize,
    pub avector: AVectorKind,
}

fn meta_sidecar_path(schedule_path: &Path) -> PathBuf {
    schedule_path.with_extension("meta.json")
}

/// Client shares as CSV plus the `client,class,count` histogram.
pub fn cmd_partition(cfg: &ExperimentConfig) -> Result<()> {
    let env = build_environment(cfg)?;
    let out = &cfg.output_dir;
    for (k, share) in env.clients.iter().enumerate() {
        let p = share.features();
        let mut text = String::new();
        for j in 0..p {
            let _ = write!(text, "f{j},");
        }
        text.push_str("label\n");
        for r in 0..share.len() {
            for j in 0..p {
                let _ = write!(text, "{},", share.inputs.get(r, j));
            }
            let _ = writeln!(text, "{}", share.labels[r]);
        }
        atomic_write(&out.join(format!("client_{k}.csv")), text.as_bytes())?;
    }
    atomic_write(&out.join("histogram.csv"), histogram_csv(&env.clients).as_bytes())?;
    println!(
        "partitioned {} samples into {} clients under {}",
        env.clients.iter().map(|c| c.len()).sum::<usize>(),
        env.clients.len(),
        out.display()
    );
    Ok(())
}

/// Train the weight schedule and persist it with its meta sidecar and the
/// meta-loss history.
pub fn cmd_train_weights(cfg: &ExperimentConfig) -> Result<()> {
    let meta = cfg.meta_config()?;
    let env = build_environment(cfg)?;
    let (schedule, history) = duw_train(&meta, &env.profiles, &env.clients, &env.layers)?;

    let out = &cfg.output_dir;
    let schedule_path = out.join("schedule.csv");
    atomic_write(&schedule_path, unfolding::schedule_csv(&schedule).as_bytes())?;

    let sidecar = ScheduleMeta {
        rounds: schedule.rounds(),
        clients: schedule.clients(),
        config_hash: cfg.content_hash(),
        client_samples: env.profiles.iter().map(|p| p.samples).collect(),
        epochs: env.profiles.iter().map(|p| p.epochs).collect(),
        tau_schedules: env.profiles.iter().map(|p| p.tau_schedule.clone()).collect(),
        batch_size: cfg.fed.batch_size,
        avector: cfg.fed.avector,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    atomic_write(&meta_sidecar_path(&schedule_path), json.as_bytes())?;

    let mut loss_csv = String::from("iteration,loss\n");
    for (m, loss) in history.iter().enumerate() {
        let _ = writeln!(loss_csv, "{m},{loss}");
    }
    atomic_write(&out.join("meta_loss.csv"), loss_csv.as_bytes())?;

    let last = history.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {}x{} schedule over {} iterations (final meta-loss {last}), wrote {}",
        schedule.rounds(),
        schedule.clients(),
        history.len(),
        schedule_path.display()
    );
    Ok(())
}

fn trace_outputs(cfg: &ExperimentConfig, repeat: usize, output: &RunOutput) -> Result<()> {
    let out = &cfg.output_dir;
    atomic_write(
        &out.join(format!("trace_{repeat}.csv")),
        output.trace.to_csv().as_bytes(),
    )?;
    if output.trace.rounds.iter().any(|r| r.accuracy.is_some()) {
        let mut text = String::from("round,accuracy\n");
        for (t, record) in output.trace.rounds.iter().enumerate() {
            if let Some(acc) = record.accuracy {
                let _ = writeln!(text, "{t},{acc}");
            }
        }
        atomic_write(&out.join(format!("rounds_{repeat}.csv")), text.as_bytes())?;
    }
    if cfg.emit_json_trace {
        let json = serde_json::to_string(&output.trace).expect("trace serializes");
        atomic_write(&out.join(format!("trace_{repeat}.json")), json.as_bytes())?;
    }
    Ok(())
}

/// Run the federated process `repeat` times with derived seeds and emit the
/// traces plus an accuracy summary.
pub fn cmd_run(cfg: &ExperimentConfig, schedule_override: Option<&Path>) -> Result<()> {
    let env = build_environment(cfg)?;
    let strategy = cfg.strategy(schedule_override)?;

    let outputs: Vec<RunOutput> = (0..cfg.repeat)
        .into_par_iter()
        .map(|r| {
            let run_seed = rng::mix(cfg.seed, &[purpose::RUN_REPEAT, r as u64]);
            let mut strategy = strategy.clone();
            fedsim::run_federated(
                &cfg.fed,
                &env.profiles,
                &env.clients,
                &env.layers,
                &mut strategy,
                env.test.as_ref(),
                run_seed,
            )
        })
        .collect::<Result<_>>()?;

    for (r, output) in outputs.iter().enumerate() {
        trace_outputs(cfg, r, output)?;
    }

    let finals: Vec<f64> = outputs
        .iter()
        .filter_map(|o| o.trace.rounds.last().and_then(|r| r.accuracy))
        .collect();
    if !finals.is_empty() {
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        let var =
            finals.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / finals.len() as f64;
        let std = var.sqrt();
        let mut text = String::from("repeat,accuracy,accuracy_std\n");
        for (r, acc) in finals.iter().enumerate() {
            let _ = writeln!(text, "{r},{acc},");
        }
        let _ = writeln!(text, "mean,{mean},{std}");
        atomic_write(&cfg.output_dir.join("accuracy.csv"), text.as_bytes())?;
        println!(
            "{} repeats: final test accuracy {mean:.4} +- {std:.4}",
            finals.len()
        );
    } else {
        println!("{} repeats finished (no test set configured)", outputs.len());
    }
    Ok(())
}

fn load_schedule_with_meta(path: &Path) -> Result<(WeightSchedule, ScheduleMeta)> {
    let text = fs::read_to_string(path)?;
    let schedule = parse_schedule_csv(&text)?;
    let sidecar_path = meta_sidecar_path(path);
    let sidecar_text = fs::read_to_string(&sidecar_path).map_err(|e| {
        Error::Data(format!("missing schedule sidecar {}: {e}", sidecar_path.display()))
    })?;
    let meta: ScheduleMeta = serde_json::from_str(&sidecar_text)
        .map_err(|e| Error::Data(format!("{}: {e}", sidecar_path.display())))?;
    if meta.rounds != schedule.rounds() || meta.clients != schedule.clients() {
        return Err(Error::Data(format!(
            "{}: sidecar says {}x{}, schedule is {}x{}",
            path.display(),
            meta.rounds,
            meta.clients,
            schedule.rounds(),
            schedule.clients()
        )));
    }
    Ok((schedule, meta))
}

/// Variance, slope, and bound-coefficient reports over a grid of trained
/// schedules (one per round count).
pub fn cmd_analyze(schedule_paths: &[PathBuf], out_dir: &Path) -> Result<()> {
    if schedule_paths.is_empty() {
        return Err(Error::Config("analyze needs at least one schedule".into()));
    }
    let mut variance_csv = String::from("T,mean_variance\n");
    let mut coeff_csv = String::from("Atilde,Btilde,Ctilde,tau_eff\n");
    let mut points = Vec::with_capacity(schedule_paths.len());
    for path in schedule_paths {
        let (schedule, meta) = load_schedule_with_meta(path)?;
        let weights = schedule.weights_matrix();
        let report = weight_variance(&weights)?;
        let _ = writeln!(variance_csv, "{},{}", schedule.rounds(), report.mean);
        points.push((schedule.rounds(), report.mean));

        let statics = weights_static_avg(&meta.client_samples)?;
        let mut a_vectors = Vec::with_capacity(schedule.rounds());
        for t in 0..schedule.rounds() {
            let mut row = Vec::with_capacity(schedule.clients());
            for kk in 0..schedule.clients() {
                let profile = ClientProfile {
                    samples: meta.client_samples[kk],
                    epochs: meta.epochs[kk],
                    comm_prob: 1.0,
                    tau_schedule: meta.tau_schedules[kk].clone(),
                };
                let tau = fedsim::tau_for_round(
                    &profile,
                    t,
                    meta.client_samples[kk],
                    meta.batch_size,
                );
                row.push(a_vector(&meta.avector, tau)?);
            }
            a_vectors.push(row);
        }
        let coeffs = bound_coefficients(&weights, &a_vectors, &statics)?;
        let _ = writeln!(
            coeff_csv,
            "{},{},{},{}",
            coeffs.a_tilde, coeffs.b_tilde, coeffs.c_tilde, coeffs.tau_eff
        );
    }
    atomic_write(&out_dir.join("variance.csv"), variance_csv.as_bytes())?;
    atomic_write(&out_dir.join("coefficients.csv"), coeff_csv.as_bytes())?;

    let slope = variance_slope(&points)?;
    let mut slope_text = format!("slope {}\npoints used {}\n", slope.slope, slope.points_used);
    if !slope.excluded.is_empty() {
        let _ = writeln!(
            slope_text,
            "excluded zero-variance points at T = {:?}",
            slope.excluded
        );
    }
    atomic_write(&out_dir.join("slope.txt"), slope_text.as_bytes())?;
    println!(
        "analyzed {} schedules: log-log variance slope {:.4}",
        schedule_paths.len(),
        slope.slope
    );
    Ok(())
}
