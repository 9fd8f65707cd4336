//! Runs one configuration over all model seeds.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use kan_core::net::count_flops_per_sample;
use kan_core::optim::{train_multilevel, HistoryRow};
use kan_core::refine::refine_network;
use kan_core::KanError;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelKind};
use crate::data::{gen_dataset, Dataset, TargetAffine};
use crate::error::{BenchError, Result};

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub problem: String,
    pub arch: String,
    pub basis: String,
    pub free_knots: bool,
    pub schedule: String,
    pub params: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Final full-dataset MSE; `None` when training hit a NaN.
    pub mse: Option<f64>,
    pub params: usize,
    pub history: Vec<HistoryRow>,
    pub transfer_gaps: Vec<f64>,
    pub fallbacks: usize,
}

/// Forward FLOPs per sample at each level and the schedule's training cost
/// (one forward pass over the dataset per epoch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub per_sample: Vec<u64>,
    pub training: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub row: ResultRow,
    pub seeds: Vec<SeedOutcome>,
    pub failed_seeds: usize,
    pub affine: TargetAffine,
    pub flops: FlopReport,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<SeedOutcome> {
    let net = cfg.architecture.build(seed)?;
    match train_multilevel(&net, &data.x, &data.y, &cfg.effective_schedule(), &cfg.optimizer) {
        Ok(mut out) => {
            let mse = match out.net.loss(&data.x, &data.y) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) | Err(KanError::NotANumber(_)) => None,
                Err(e) => return Err(e.into()),
            };
            Ok(SeedOutcome {
                seed,
                mse,
                params: out.net.param_count(),
                history: out.history,
                transfer_gaps: out.transfer_gaps,
                fallbacks: out.fallbacks,
            })
        }
        Err(KanError::NotANumber(_)) => Ok(SeedOutcome {
            seed,
            mse: None,
            params: 0,
            history: Vec::new(),
            transfer_gaps: Vec::new(),
            fallbacks: 0,
        }),
        Err(e) => Err(e.into()),
    }
}

/// Per-level forward cost of the configured architecture.
pub fn flop_report(cfg: &ExperimentConfig, data_count: usize) -> Result<FlopReport> {
    let schedule = &cfg.schedule;
    let mut net = cfg.architecture.build(0)?;
    let mut per_sample = Vec::with_capacity(schedule.len());
    for level in 0..schedule.len() {
        if level > 0 {
            net = refine_network(&net)?.fine;
        }
        per_sample.push(count_flops_per_sample(&net));
    }
    let training = kan_core::optim::schedule_flops(schedule, &per_sample) * data_count as u64;
    Ok(FlopReport { per_sample, training })
}

/// Trains one network per model seed on a shared dataset.
///
/// Seeds are spread over a worker pool sized to the available parallelism;
/// each owns its RNG, tape and optimizer
/// state, so results do not depend on scheduling. Seeds whose loss becomes
/// NaN are excluded from the statistics and counted in `failed_seeds`.
pub fn run_on(cfg: &ExperimentConfig, data: &Dataset, timing: bool) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let seeds = &cfg.model_seeds;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<SeedOutcome>>> = (0..seeds.len()).map(|_| None).collect();
    let done: Vec<Vec<(usize, Result<SeedOutcome>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= seeds.len() {
                            break out;
                        }
                        out.push((i, run_seed(cfg, data, seeds[i])));
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_default()).collect()
    });
    for (i, r) in done.into_iter().flatten() {
        slots[i] = Some(r);
    }
    let outcomes: Vec<Result<SeedOutcome>> = slots
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(BenchError::Config("training thread panicked".into()))))
        .collect();
    let seconds = if timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let seeds = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let mses: Vec<f64> = seeds.iter().filter_map(|s| s.mse).collect();
    let failed = seeds.len() - mses.len();
    if mses.is_empty() {
        return Err(BenchError::AllSeedsFailed(seeds.len()));
    }
    if failed > 0 {
        eprintln!("warning: {failed} of {} seeds diverged for {cfg}", seeds.len());
    }
    let (mse_mean, mse_std) = mean_std(&mses);
    let params = seeds.iter().find(|s| s.mse.is_some()).map_or(0, |s| s.params);
    let a = &cfg.architecture;
    let row = ResultRow {
        problem: cfg.problem.label().to_string(),
        arch: a.label(),
        basis: match a.kind {
            ModelKind::Kan => a.basis.label().to_string(),
            ModelKind::Mlp => "mlp".to_string(),
        },
        free_knots: a.kind == ModelKind::Kan && a.free_knots,
        schedule: cfg.schedule_label(),
        params,
        mse_mean,
        mse_std,
        seconds,
    };
    Ok(ExperimentResult {
        config: cfg.clone(),
        row,
        seeds,
        failed_seeds: failed,
        affine: data.affine,
        flops: flop_report(cfg, data.x.rows())?,
    })
}

/// Generates the dataset and runs the configuration.
pub fn run_experiment(cfg: &ExperimentConfig, timing: bool) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = gen_dataset(cfg)?;
    run_on(cfg, &data, timing)
}
