use super::{AlignProblem, ViewRoot};
use crate::error::{Error, Result};
use crate::rig::Pose;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Iterations over which the loss must keep changing by at least `tolerance`.
pub const CONVERGENCE_WINDOW: usize = 20;
/// Consecutive iterations above `DIVERGENCE_FACTOR × initial` that abort a run.
pub const DIVERGENCE_PATIENCE: usize = 50;
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Converged once the loss varies by less than this (px²) across the
    /// convergence window.
    pub tolerance: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Cosine-annealed learning rate ends at `learning_rate × final_lr_fraction`.
    pub final_lr_fraction: f64,
    /// Std-dev (radians) of a seeded perturbation of the initial per-view
    /// root rotations; 0 disables it.
    pub init_jitter: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            max_iterations: 300,
            tolerance: 1e-9,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            final_lr_fraction: 0.01,
            init_jitter: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.tolerance >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.final_lr_fraction > 0.0
            && self.final_lr_fraction <= 1.0
            && self.init_jitter >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("optimizer configuration out of range"))
        }
    }

    fn lr_at(&self, iter: usize) -> f64 {
        if self.max_iterations <= 1 {
            return self.learning_rate;
        }
        let progress = iter as f64 / (self.max_iterations - 1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimStatus {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub iterations: usize,
    pub initial_loss: f64,
    /// Loss at the returned (best-seen) parameters.
    pub final_loss: f64,
    pub per_view_loss: Vec<f64>,
    /// Loss at every evaluated parameter set, initial included.
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    pub status: OptimStatus,
    pub matched_pairs: usize,
    pub unmatched_targets: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct AlignResult {
    pub pose: Pose,
    pub per_view_root: Vec<ViewRoot>,
    pub report: OptimReport,
    /// The problem with the best-seen parameters installed.
    pub problem: AlignProblem,
}

fn window_spread(losses: &[f64]) -> f64 {
    let (lo, hi) = losses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// Adam over all alignment parameters; returns the best parameters seen.
pub fn optimize_pose(problem: &AlignProblem, config: &OptimizerConfig) -> Result<AlignResult> {
    config.validate()?;
    problem.validate()?;
    let start = Instant::now();
    let mut work = problem.clone();

    if config.init_jitter > 0.0 && !work.freeze.view_roots {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_jitter).map_err(|e| Error::invalid(e.to_string()))?;
        for v in &mut work.per_view_root {
            for x in v.rotation.iter_mut() {
                *x += normal.sample(&mut rng);
            }
        }
    }

    let mut params = work.parameters();
    let trainable = work.trainable_mask();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut trace = Vec::with_capacity(config.max_iterations + 1);
    let mut best_params = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut initial_loss = f64::NAN;
    let mut above = 0usize;
    let mut status = OptimStatus::MaxIterations;
    let mut iterations = 0usize;

    loop {
        work.set_parameters(&params);
        let wants_grad = iterations < config.max_iterations;
        let ev = work.objective(wants_grad)?;
        if trace.is_empty() {
            initial_loss = ev.loss;
        }
        trace.push(ev.loss);
        if ev.loss < best_loss {
            best_loss = ev.loss;
            best_params.clone_from(&params);
        }

        if ev.loss > DIVERGENCE_FACTOR * initial_loss {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                status = OptimStatus::Diverged;
                break;
            }
        } else {
            above = 0;
        }
        // Plateau test: the loss spread over the window is below tolerance.
        // Measuring the spread rather than the net change keeps momentum
        // overshoot from reading as convergence.
        let k = trace.len() - 1;
        if k >= CONVERGENCE_WINDOW && window_spread(&trace[k - CONVERGENCE_WINDOW..]) < config.tolerance {
            status = OptimStatus::Converged;
            break;
        }
        if !wants_grad {
            break;
        }

        let grad = ev.gradient.expect("gradient requested").as_flat();
        iterations += 1;
        let t = iterations as i32;
        let lr = config.lr_at(iterations - 1);
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + config.epsilon);
        }
    }

    work.set_parameters(&best_params);
    let final_eval = work.objective(false)?;
    let report = OptimReport {
        iterations,
        initial_loss,
        final_loss: final_eval.loss,
        per_view_loss: final_eval.per_view_loss,
        loss_trace: trace,
        converged: status == OptimStatus::Converged,
        status,
        matched_pairs: final_eval.matched_pairs,
        unmatched_targets: work.unmatched_targets(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if status == OptimStatus::Diverged {
        return Err(Error::Diverged {
            iterations,
            loss: report.loss_trace.last().copied().unwrap_or(f64::NAN),
            initial: initial_loss,
            report: Box::new(report),
        });
    }
    Ok(AlignResult {
        pose: work.shared_pose.clone(),
        per_view_root: work.per_view_root.clone(),
        report,
        problem: work,
    })
}
