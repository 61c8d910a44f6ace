//! Deterministic DDIM (η = 0) inversion and sampling with classifier-free
//! guidance over a pluggable noise predictor.
//!
//! Timesteps are real-valued indices into the schedule: `0` is clean data,
//! `T` the noisiest level. Fractional timesteps interpolate `log ᾱ` linearly,
//! which the time-shifted denoising loop needs when it spreads τ steps over
//! a shorter interval.

mod articulate;
mod predictor;
mod sds;

pub use articulate::{articulate, ArticulateConfig, ArticulateOutput, ArticulatePrompts, Pass, SourceCache, StartMode};
pub use predictor::{
    AttentionHook, AttentionToyPredictor, CondRole, Conditioning, ConstantPredictor, GainProfile, LinearPredictor,
    NoisePredictor, ZeroPredictor,
};
pub use sds::{sds_gradient, DifferentiableRender, Weighting};

use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub type Latent = Array3<f64>;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 1.2e-2;

/// Cumulative signal levels `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_T > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// β linear in `[beta_start, beta_end]` over steps `1..=steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::invalid("betas must satisfy 0 < start ≤ end < 1"));
        }
        let mut alphas_bar = Vec::with_capacity(steps + 1);
        alphas_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            acc *= 1.0 - (beta_start + (beta_end - beta_start) * frac);
            alphas_bar.push(acc);
        }
        Self::from_alphas_bar(alphas_bar)
    }

    pub fn from_alphas_bar(alphas_bar: Vec<f64>) -> Result<Self> {
        if alphas_bar.len() < 2 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if alphas_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::invalid("ᾱ values must lie in (0, 1]"));
        }
        if alphas_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("ᾱ must be strictly decreasing"));
        }
        Ok(NoiseSchedule { alphas_bar })
    }

    pub fn steps(&self) -> usize {
        self.alphas_bar.len() - 1
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        let max = self.steps() as f64;
        if !(0.0..=max).contains(&t) {
            return Err(Error::invalid(format!("timestep {t} outside [0, {max}]")));
        }
        let i = t.floor() as usize;
        let frac = t - i as f64;
        if frac == 0.0 {
            return Ok(self.alphas_bar[i]);
        }
        let (a, b) = (self.alphas_bar[i].ln(), self.alphas_bar[i + 1].ln());
        Ok((a + (b - a) * frac).exp())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid default schedule")
    }
}

fn same_shape(a: &Latent, b: &Latent, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// One deterministic DDIM update from `t` to `t_next` (either direction).
pub fn ddim_step(z: &Latent, eps: &Latent, t: f64, t_next: f64, schedule: &NoiseSchedule) -> Result<Latent> {
    same_shape(z, eps, "latent vs noise")?;
    if t == t_next {
        return Ok(z.clone());
    }
    let a_t = schedule.alpha_bar(t)?;
    let a_n = schedule.alpha_bar(t_next)?;
    let (sa_t, sb_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sa_n, sb_n) = (a_n.sqrt(), (1.0 - a_n).sqrt());
    Ok(ndarray::Zip::from(z).and(eps).map_collect(|&z, &e| {
        let x0 = (z - sb_t * e) / sa_t;
        sa_n * x0 + sb_n * e
    }))
}

/// Classifier-free guidance: `ε̂_u + w·(ε̂_c − ε̂_u)`.
///
/// `w = 1` and identical conditionings return the conditional prediction
/// exactly, without the extrapolation arithmetic.
pub fn guide(
    predictor: &dyn NoisePredictor,
    z: &Latent,
    t: f64,
    cond: &Conditioning,
    uncond: &Conditioning,
    scale: f64,
) -> Result<Latent> {
    let c = predict_checked(predictor, z, cond, t, &mut AttentionHook::Plain)?;
    if scale == 1.0 || cond.embedding == uncond.embedding {
        return Ok(c);
    }
    let u = predict_checked(predictor, z, uncond, t, &mut AttentionHook::Plain)?;
    Ok(combine(&u, &c, scale))
}

pub(crate) fn combine(u: &Latent, c: &Latent, scale: f64) -> Latent {
    if scale == 1.0 {
        return c.clone();
    }
    ndarray::Zip::from(u).and(c).map_collect(|&u, &c| u + scale * (c - u))
}

pub(crate) fn predict_checked(
    predictor: &dyn NoisePredictor,
    z: &Latent,
    cond: &Conditioning,
    t: f64,
    hook: &mut AttentionHook<'_>,
) -> Result<Latent> {
    if cond.embedding.len() != predictor.cond_dim() {
        return Err(Error::dim(format!(
            "conditioning of length {} for predictor '{}' expecting {}",
            cond.embedding.len(),
            predictor.name(),
            predictor.cond_dim()
        )));
    }
    let eps = predictor.predict(z, cond, t, hook)?;
    same_shape(z, &eps, "predictor output")?;
    Ok(eps)
}

/// Unguided prediction with no attention hook.
pub fn predict_plain(predictor: &dyn NoisePredictor, z: &Latent, cond: &Conditioning, t: f64) -> Result<Latent> {
    predict_checked(predictor, z, cond, t, &mut AttentionHook::Plain)
}

/// Latents visited by a DDIM run; `noises[i]` moved `latents[i]` (at
/// `timesteps[i]`) to `latents[i + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrajectory {
    pub timesteps: Vec<f64>,
    #[serde(with = "latent_list")]
    pub latents: Vec<Latent>,
    #[serde(with = "latent_list")]
    pub noises: Vec<Latent>,
}

impl DiffusionTrajectory {
    fn start(z: Latent, t: f64) -> Self {
        DiffusionTrajectory { timesteps: vec![t], latents: vec![z], noises: Vec::new() }
    }

    fn push(&mut self, eps: Latent, t_next: f64, z_next: Latent) {
        self.noises.push(eps);
        self.timesteps.push(t_next);
        self.latents.push(z_next);
    }

    pub fn steps(&self) -> usize {
        self.noises.len()
    }

    pub fn last(&self) -> &Latent {
        self.latents.last().expect("trajectory holds its input")
    }

    pub fn first(&self) -> &Latent {
        &self.latents[0]
    }

    /// Replays the recorded noises backward through [`ddim_step`].
    pub fn replay_backward(&self, schedule: &NoiseSchedule) -> Result<Latent> {
        let mut z = self.last().clone();
        for i in (0..self.steps()).rev() {
            z = ddim_step(&z, &self.noises[i], self.timesteps[i + 1], self.timesteps[i], schedule)?;
        }
        Ok(z)
    }
}

mod latent_list {
    use super::Latent;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Flat {
        shape: [usize; 3],
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(v: &[Latent], s: S) -> Result<S::Ok, S::Error> {
        let flat: Vec<Flat> = v
            .iter()
            .map(|l| {
                let (a, b, c) = l.dim();
                Flat { shape: [a, b, c], data: l.iter().copied().collect() }
            })
            .collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Latent>, D::Error> {
        let flat = Vec::<Flat>::deserialize(d)?;
        flat.into_iter()
            .map(|f| {
                Latent::from_shape_vec((f.shape[0], f.shape[1], f.shape[2]), f.data)
                    .map_err(serde::de::Error::custom)
            })
            .collect()
    }
}

/// Guided DDIM inversion from timestep 0 up to `depth`.
pub fn invert(
    input: &Latent,
    predictor: &dyn NoisePredictor,
    c_orig: &Conditioning,
    c_empty: &Conditioning,
    depth: usize,
    guidance: f64,
    schedule: &NoiseSchedule,
) -> Result<DiffusionTrajectory> {
    if depth > schedule.steps() {
        return Err(Error::invalid(format!("inversion depth {depth} exceeds {} steps", schedule.steps())));
    }
    let mut traj = DiffusionTrajectory::start(input.clone(), 0.0);
    for i in 0..depth {
        let (t, t_next) = (i as f64, (i + 1) as f64);
        let z = traj.last();
        let eps = guide(predictor, z, t, c_orig, c_empty, guidance)?;
        let z_next = ddim_step(z, &eps, t, t_next, schedule)?;
        traj.push(eps, t_next, z_next);
    }
    Ok(traj)
}

/// `steps + 1` timesteps from `from` down to 0 with uniform stride.
///
/// Denoising always runs `steps` iterations whatever the starting depth;
/// shallow starts take proportionally smaller strides.
pub fn time_shifted_timesteps(from: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|i| if i == steps { 0.0 } else { from * (1.0 - i as f64 / steps as f64) })
        .collect()
}

/// Guided DDIM sampling along an explicit timestep sequence.
pub fn sample(
    start: &Latent,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    uncond: &Conditioning,
    guidance: f64,
    timesteps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<DiffusionTrajectory> {
    let Some((&t0, _)) = timesteps.split_first() else {
        return Err(Error::invalid("empty timestep sequence"));
    };
    let mut traj = DiffusionTrajectory::start(start.clone(), t0);
    for w in timesteps.windows(2) {
        let z = traj.last();
        let eps = guide(predictor, z, w[0], cond, uncond, guidance)?;
        let z_next = ddim_step(z, &eps, w[0], w[1], schedule)?;
        traj.push(eps, w[1], z_next);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests;
