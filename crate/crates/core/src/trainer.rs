//! Seeded minibatch training with Adam, best-of-R restarts and ELBO traces.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::DataMatrix;
use crate::diffcore::{adam_step, AdamConfig, RngState, SeededRng};
use crate::elbo::{objective, objective_and_grad, Batch, ElboBreakdown, PriorConfig, Scheme};
use crate::error::{Error, Result};
use crate::model::{BasisVae, ModelConfig};

/// Seed of the fixed noise draw used by [`evaluate`].
pub const EVAL_SEED: u64 = 0x5eed_e7a1;
/// Moving-average window used when comparing restarts.
pub const SMOOTHING_WINDOW: usize = 20;
/// Environment variable capping the number of restarts run in parallel.
pub const THREADS_ENV: &str = "BASISCLUSTER_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub epochs: usize,
    /// Clamped to the number of observations.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub restarts: usize,
    pub model: ModelConfig,
    pub prior: PriorConfig,
    /// Log progress every this many optimiser steps (0 disables).
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            scheme: Scheme::Collapsed,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            restarts: 1,
            model,
            prior: PriorConfig::default(),
            log_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        self.model.validate()?;
        self.prior.alpha_for(self.model.k)?;
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Outcome of one restart.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Full-data objective at initialisation followed by the mean minibatch
    /// breakdown of every epoch.
    pub trace: Vec<ElboBreakdown>,
    pub model: BasisVae,
    pub wall_time: f64,
    pub restart: usize,
    /// Optimiser steps taken.
    pub steps: u64,
    pub steps_per_epoch: usize,
    pub rng_state: RngState,
}

impl TrainReport {
    /// Mean total over the last [`SMOOTHING_WINDOW`] trace entries.
    pub fn smoothed_final(&self) -> f64 {
        smoothed_tail(&self.trace, SMOOTHING_WINDOW)
    }

    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            rng: Some(self.rng_state),
            meta: serde_json::json!({
                "train": config,
                "restart": self.restart,
                "steps": self.steps,
            }),
        }
    }

    /// Writes `step,<terms>,total` rows, one per trace entry.
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step");
        for t in ElboBreakdown::TERMS {
            out.push(',');
            out.push_str(t);
        }
        out.push_str(",total\n");
        for (e, b) in self.trace.iter().enumerate() {
            out.push_str(&(e * self.steps_per_epoch).to_string());
            for v in b.terms() {
                out.push(',');
                out.push_str(&crate::data::format_value(v));
            }
            out.push(',');
            out.push_str(&crate::data::format_value(b.total));
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Mean total of the last `window` entries (all of them if fewer).
pub fn smoothed_tail(trace: &[ElboBreakdown], window: usize) -> f64 {
    let tail = &trace[trace.len().saturating_sub(window.max(1))..];
    tail.iter().map(|b| b.total).sum::<f64>() / tail.len() as f64
}

/// Mean total of the first `window` entries.
pub fn smoothed_head(trace: &[ElboBreakdown], window: usize) -> f64 {
    let head = &trace[..window.max(1).min(trace.len())];
    head.iter().map(|b| b.total).sum::<f64>() / head.len() as f64
}

/// Full-data objective with one fixed-seed noise draw per observation.
pub fn evaluate(data: &DataMatrix, model: &BasisVae, prior: &PriorConfig, scheme: Scheme) -> Result<ElboBreakdown> {
    if data.p() != model.config.p {
        return Err(Error::shape("evaluate data", &[data.n(), model.config.p], data.values.shape()));
    }
    let eps = SeededRng::new(EVAL_SEED).standard_normal(&[data.n(), model.config.q]);
    objective(
        model,
        scheme,
        prior,
        Batch {
            y: &data.values,
            eps: &eps,
            n_total: data.n(),
        },
    )
}

/// Fresh model for restart `restart`, drawn from its own rng stream.
pub fn init_model(config: &TrainConfig, restart: usize) -> Result<(BasisVae, SeededRng)> {
    let mut rng = SeededRng::with_stream(config.seed, restart as u64);
    let mut model = BasisVae::new(config.model.clone(), &mut rng)?;
    if config.scheme == Scheme::NonCollapsed {
        model.add_dirichlet_posterior(&config.prior.alpha_for(config.model.k)?)?;
    }
    Ok((model, rng))
}

/// Runs a single restart.
pub fn train_restart(data: &DataMatrix, config: &TrainConfig, restart: usize) -> Result<TrainReport> {
    config.validate()?;
    if data.p() != config.model.p {
        return Err(Error::Config(format!(
            "data has {} features but the model expects {}",
            data.p(),
            config.model.p
        )));
    }
    let n = data.n();
    if n == 0 {
        return Err(Error::Empty("training data has no rows".into()));
    }
    let start = Instant::now();
    let (mut model, mut rng) = init_model(config, restart)?;
    let batch = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let adam = config.adam();
    let q = config.model.q;
    let mut trace = vec![evaluate(data, &model, &config.prior, config.scheme)?];
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut parts = Vec::with_capacity(steps_per_epoch);
        for idx in order.chunks(batch) {
            let y = data.values.select_rows(idx);
            let eps = rng.standard_normal(&[idx.len(), q]);
            let b = objective_and_grad(
                &mut model,
                config.scheme,
                &config.prior,
                Batch {
                    y: &y,
                    eps: &eps,
                    n_total: n,
                },
            )
            .and_then(|b| {
                step += 1;
                adam_step(&mut model.store, &adam, step)?;
                Ok(b)
            })
            .map_err(|e| Error::NonFinite(format!("restart {restart} aborted at epoch {epoch}, step {step}: {e}")))?;
            if config.log_every > 0 && step % config.log_every as u64 == 0 {
                log::info!("restart {restart} step {step}: total {:.4}", b.total);
            }
            parts.push(b);
        }
        trace.push(ElboBreakdown::mean(&parts).expect("at least one batch per epoch"));
    }
    Ok(TrainReport {
        trace,
        model,
        wall_time: start.elapsed().as_secs_f64(),
        restart,
        steps: step,
        steps_per_epoch,
        rng_state: rng.state(),
    })
}

fn thread_cap(restarts: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(available);
    cap.min(restarts).max(1)
}

/// Runs every restart (in parallel, capped by `BASISCLUSTER_THREADS`),
/// returning each restart's outcome in restart order.
pub fn train_all(data: &DataMatrix, config: &TrainConfig) -> Result<Vec<Result<TrainReport>>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap(config.restarts))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<TrainReport>> = pool.install(|| {
        (0..config.restarts)
            .into_par_iter()
            .map(|r| train_restart(data, config, r))
            .collect()
    });
    for r in results.iter().filter_map(|r| r.as_ref().err()) {
        log::warn!("{r}");
    }
    Ok(results)
}

/// Trains all restarts and keeps the best one.
pub fn train(data: &DataMatrix, config: &TrainConfig) -> Result<TrainReport> {
    let results = train_all(data, config)?;
    let mut last_err = None;
    let mut ok = Vec::new();
    for r in results {
        match r {
            Ok(rep) => ok.push(rep),
            Err(e) => last_err = Some(e),
        }
    }
    if ok.is_empty() {
        return Err(last_err.unwrap_or_else(|| Error::Empty("no restarts ran".into())));
    }
    best_of_restarts(ok)
}

/// Report with the highest smoothed final total; ties go to the earliest.
pub fn best_of_restarts(reports: Vec<TrainReport>) -> Result<TrainReport> {
    let idx = best_index(&reports.iter().map(TrainReport::smoothed_final).collect::<Vec<_>>())
        .ok_or_else(|| Error::Empty("best_of_restarts called with no reports".into()))?;
    Ok(reports.into_iter().nth(idx).expect("index in range"))
}

/// Index of the largest finite score, lowest index on ties.
pub fn best_index(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best.or(if scores.is_empty() { None } else { Some(0) })
}
