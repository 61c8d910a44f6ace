use super::{
    combine, ddim_step, predict_checked, time_shifted_timesteps, AttentionHook, Conditioning, DiffusionTrajectory,
    Latent, NoisePredictor, NoiseSchedule, DEFAULT_GUIDANCE, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::rsactrl::Qkv;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Cond,
    Uncond,
}

impl Pass {
    pub fn label(self) -> &'static str {
        match self {
            Pass::Cond => "cond",
            Pass::Uncond => "uncond",
        }
    }
}

/// Source-branch Q/K/V per denoising step, guidance pass and layer.
#[derive(Debug, Clone, Default)]
pub struct SourceCache {
    entries: BTreeMap<(usize, Pass), Vec<Qkv>>,
}

impl SourceCache {
    pub fn insert(&mut self, step: usize, pass: Pass, layers: Vec<Qkv>) {
        self.entries.insert((step, pass), layers);
    }

    pub fn layers(&self, step: usize, pass: Pass) -> &[Qkv] {
        self.entries.get(&(step, pass)).map_or(&[], Vec::as_slice)
    }

    /// The first `n_layers` entries for `(step, pass)`.
    pub fn require(&self, step: usize, pass: Pass, n_layers: usize) -> Result<&[Qkv]> {
        let layers = self.layers(step, pass);
        if layers.len() < n_layers {
            return Err(Error::MissingCache { step, pass: pass.label(), layer: layers.len() });
        }
        Ok(&layers[..n_layers])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// How the articulation branch's starting latent is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StartMode {
    SameAsSource,
    /// Re-noise the clean input to the inversion depth with fresh noise.
    Independent { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArticulateConfig {
    pub steps: usize,
    pub guidance: f64,
    pub start: StartMode,
}

impl Default for ArticulateConfig {
    fn default() -> Self {
        ArticulateConfig { steps: DEFAULT_STEPS, guidance: DEFAULT_GUIDANCE, start: StartMode::SameAsSource }
    }
}

/// Conditioning slots for the two branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ArticulatePrompts {
    pub source: Conditioning,
    pub empty: Conditioning,
    pub articulation: Conditioning,
    pub negative: Conditioning,
}

#[derive(Debug, Clone)]
pub struct ArticulateOutput {
    pub source: DiffusionTrajectory,
    pub articulation: DiffusionTrajectory,
    pub steps_executed: usize,
    pub cache: SourceCache,
}

impl ArticulateOutput {
    pub fn source_final(&self) -> &Latent {
        self.source.last()
    }

    pub fn articulated_final(&self) -> &Latent {
        self.articulation.last()
    }
}

fn articulation_start(inversion: &DiffusionTrajectory, mode: StartMode, schedule: &NoiseSchedule) -> Result<Latent> {
    match mode {
        StartMode::SameAsSource => Ok(inversion.last().clone()),
        StartMode::Independent { seed } => {
            let t = *inversion.timesteps.last().expect("trajectory holds its input");
            let a = schedule.alpha_bar(t)?;
            let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(inversion.first().mapv(|x0| {
                let xi: f64 = StandardNormal.sample(&mut rng);
                sa * x0 + sb * xi
            }))
        }
    }
}

/// Lockstep source/articulation denoising from the end of an inversion
/// trajectory.
///
/// Each step runs the source branch first, capturing its attention Q/K/V
/// for both guidance passes, then the articulation branch with those
/// captures rewired into its attention layers. The loop always runs
/// `config.steps` iterations spread uniformly over `[t̄, 0]`.
pub fn articulate(
    inversion: &DiffusionTrajectory,
    predictor: &dyn NoisePredictor,
    prompts: &ArticulatePrompts,
    config: &ArticulateConfig,
    schedule: &NoiseSchedule,
) -> Result<ArticulateOutput> {
    if config.steps == 0 {
        return Err(Error::invalid("articulation needs at least one denoising step"));
    }
    if !config.guidance.is_finite() {
        return Err(Error::invalid("guidance scale must be finite"));
    }
    let depth = *inversion.timesteps.last().expect("trajectory holds its input");
    let timesteps = time_shifted_timesteps(depth, config.steps);
    let n_layers = predictor.attention_layers();
    let guided = config.guidance != 1.0;

    let mut source = DiffusionTrajectory::start(inversion.last().clone(), depth);
    let mut articulation = DiffusionTrajectory::start(articulation_start(inversion, config.start, schedule)?, depth);
    let mut cache = SourceCache::default();

    for (step, w) in timesteps.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);

        let zs = source.last();
        let mut captured = Vec::with_capacity(n_layers);
        let cond = predict_checked(predictor, zs, &prompts.source, t, &mut AttentionHook::Capture(&mut captured))?;
        cache.insert(step, Pass::Cond, captured);
        let eps_s = if guided {
            let mut captured = Vec::with_capacity(n_layers);
            let uncond = predict_checked(predictor, zs, &prompts.empty, t, &mut AttentionHook::Capture(&mut captured))?;
            cache.insert(step, Pass::Uncond, captured);
            combine(&uncond, &cond, config.guidance)
        } else {
            cond
        };

        let za = articulation.last();
        let layers = cache.require(step, Pass::Cond, n_layers)?;
        let cond = predict_checked(predictor, za, &prompts.articulation, t, &mut AttentionHook::Rewire(layers))?;
        let eps_a = if guided {
            let layers = cache.require(step, Pass::Uncond, n_layers)?;
            let uncond = predict_checked(predictor, za, &prompts.negative, t, &mut AttentionHook::Rewire(layers))?;
            combine(&uncond, &cond, config.guidance)
        } else {
            cond
        };

        let zs_next = ddim_step(zs, &eps_s, t, t_next, schedule)?;
        let za_next = ddim_step(za, &eps_a, t, t_next, schedule)?;
        source.push(eps_s, t_next, zs_next);
        articulation.push(eps_a, t_next, za_next);
    }

    let steps_executed = articulation.steps();
    Ok(ArticulateOutput { source, articulation, steps_executed, cache })
}
