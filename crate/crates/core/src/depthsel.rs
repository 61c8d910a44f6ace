//! Inversion-depth selection by the mean prompt-conditioned noise
//! difference along the reconstruction trajectory.

use crate::ddim::{
    invert, predict_plain, sample, time_shifted_timesteps, Conditioning, DiffusionTrajectory, Latent, NoisePredictor,
    NoiseSchedule, DEFAULT_GUIDANCE, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use serde::{Deserialize, Serialize};

pub const DEFAULT_CANDIDATES: [usize; 9] = [5, 10, 15, 20, 25, 30, 35, 40, 45];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthScore {
    pub depth: usize,
    pub d: f64,
    pub per_step_norms: Vec<f64>,
}

/// Mean over the trajectory's prediction points of
/// `‖p(z_t, e_p) − p(z_t, e_∅)‖₂`.
///
/// Prediction points are every recorded latent that was stepped from, so
/// the final latent is not scored.
pub fn noise_diff_norm(
    predictor: &dyn NoisePredictor,
    trajectory: &DiffusionTrajectory,
    depth: usize,
    e_p: &Conditioning,
    e_null: &Conditioning,
) -> Result<DepthScore> {
    let steps = trajectory.steps();
    if steps == 0 {
        return Err(Error::invalid("cannot score a trajectory with no steps"));
    }
    let per_step_norms = (0..steps)
        .map(|i| {
            let (z, t) = (&trajectory.latents[i], trajectory.timesteps[i]);
            let a = predict_plain(predictor, z, e_p, t)?;
            let b = predict_plain(predictor, z, e_null, t)?;
            Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    let d = per_step_norms.iter().sum::<f64>() / steps as f64;
    Ok(DepthScore { depth, d, per_step_norms })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthSearch {
    pub candidates: Vec<usize>,
    pub guidance: f64,
    pub denoise_steps: usize,
    pub execution: Execution,
}

impl Default for DepthSearch {
    fn default() -> Self {
        DepthSearch {
            candidates: DEFAULT_CANDIDATES.to_vec(),
            guidance: DEFAULT_GUIDANCE,
            denoise_steps: DEFAULT_STEPS,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DepthOutcome {
    Selected { depth: usize },
    /// Every candidate scored exactly zero.
    NoSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSelection {
    pub outcome: DepthOutcome,
    /// One score per distinct candidate, by increasing depth.
    pub scores: Vec<DepthScore>,
}

impl DepthSelection {
    pub fn depth(&self) -> Option<usize> {
        match self.outcome {
            DepthOutcome::Selected { depth } => Some(depth),
            DepthOutcome::NoSignal => None,
        }
    }
}

/// Scores one candidate: invert to `depth`, reconstruct over the
/// time-shifted grid, score the reconstruction.
pub fn score_depth(
    predictor: &dyn NoisePredictor,
    input: &Latent,
    depth: usize,
    e_p: &Conditioning,
    e_null: &Conditioning,
    search: &DepthSearch,
    schedule: &NoiseSchedule,
) -> Result<DepthScore> {
    let inv = invert(input, predictor, e_p, e_null, depth, search.guidance, schedule)?;
    let grid = time_shifted_timesteps(depth as f64, search.denoise_steps);
    let rec = sample(inv.last(), predictor, e_p, e_null, search.guidance, &grid, schedule)?;
    noise_diff_norm(predictor, &rec, depth, e_p, e_null)
}

/// Argmax of the reconstruction score over the candidates, ties going to the
/// smaller depth.
pub fn select_depth(
    predictor: &dyn NoisePredictor,
    input: &Latent,
    e_p: &Conditioning,
    e_null: &Conditioning,
    search: &DepthSearch,
    schedule: &NoiseSchedule,
) -> Result<DepthSelection> {
    let mut candidates = search.candidates.clone();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate depths"));
    }
    if let Some(&bad) = candidates.iter().find(|&&d| d > schedule.steps()) {
        return Err(Error::invalid(format!("candidate depth {bad} exceeds {} steps", schedule.steps())));
    }
    if search.denoise_steps == 0 {
        return Err(Error::invalid("reconstruction needs at least one step"));
    }
    let scores = search
        .execution
        .map(candidates.len(), |i| score_depth(predictor, input, candidates[i], e_p, e_null, search, schedule))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let best = scores.iter().fold(&scores[0], |best, s| if s.d > best.d { s } else { best });
    let outcome = if best.d > 0.0 { DepthOutcome::Selected { depth: best.depth } } else { DepthOutcome::NoSignal };
    Ok(DepthSelection { outcome, scores })
}
