use crate::align::{OptimizerConfig, DEFAULT_ROOT_ATTENUATION};
use crate::ddim::{GainProfile, NoiseSchedule, StartMode, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use crate::depthsel::DEFAULT_CANDIDATES;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mvcam::{make_ring_rig, Intrinsics, ViewRig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Camera ring used when no cameras file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingConfig {
    pub count: usize,
    pub elevation: f64,
    pub radius: f64,
    pub focal: f64,
    pub principal: [f64; 2],
    pub image_size: [u32; 2],
}

impl Default for RingConfig {
    fn default() -> Self {
        let i = Intrinsics::default();
        RingConfig {
            count: 8,
            elevation: 0.35,
            radius: 4.5,
            focal: i.focal,
            principal: i.principal,
            image_size: [i.image_size.0, i.image_size.1],
        }
    }
}

impl RingConfig {
    pub fn build(&self) -> Result<ViewRig> {
        let intrinsics = Intrinsics {
            focal: self.focal,
            principal: self.principal,
            image_size: (self.image_size[0], self.image_size[1]),
        };
        make_ring_rig(self.count, self.elevation, self.radius, intrinsics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: DEFAULT_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthSelectionConfig {
    pub enabled: bool,
    pub candidates: Vec<usize>,
    /// Depth used when selection is disabled or finds no signal. `None`
    /// turns a no-signal outcome into an error.
    pub fallback: Option<usize>,
}

impl Default for DepthSelectionConfig {
    fn default() -> Self {
        DepthSelectionConfig { enabled: true, candidates: DEFAULT_CANDIDATES.to_vec(), fallback: Some(25) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    Zero,
    Linear,
    AttentionToy,
}

/// Toy-predictor setup for `diffusion-demo`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub predictor: PredictorKind,
    /// Tokens per view.
    pub tokens: usize,
    pub channels: usize,
    pub cond_dim: usize,
    /// Denoising iterations per articulation run.
    pub denoise_steps: usize,
    pub start: StartMode,
    /// Scale of the linear predictor's state matrix.
    pub linear_scale: f64,
    /// Linear predictor conditioning gain over timesteps.
    pub linear_gain: GainProfile,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            predictor: PredictorKind::AttentionToy,
            tokens: 16,
            channels: 4,
            cond_dim: 8,
            denoise_steps: DEFAULT_STEPS,
            start: StartMode::SameAsSource,
            linear_scale: 1e-5,
            linear_gain: GainProfile::default(),
        }
    }
}

/// Everything a run needs. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rig: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cameras: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<PathBuf>,
    pub views: RingConfig,
    pub root_attenuation: f64,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub guidance: f64,
    pub depth_selection: DepthSelectionConfig,
    pub diffusion: DiffusionConfig,
    pub execution: Execution,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rig: None,
            mesh: None,
            cameras: None,
            targets: None,
            views: RingConfig::default(),
            root_attenuation: DEFAULT_ROOT_ATTENUATION,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            guidance: DEFAULT_GUIDANCE,
            depth_selection: DepthSelectionConfig::default(),
            diffusion: DiffusionConfig::default(),
            execution: Execution::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.build()?;
        if !(0.0..=1.0).contains(&self.root_attenuation) {
            return Err(Error::invalid(format!("root_attenuation {} outside [0, 1]", self.root_attenuation)));
        }
        if !self.guidance.is_finite() {
            return Err(Error::invalid("guidance must be finite"));
        }
        let steps = self.schedule.steps;
        if let Some(&d) = self.depth_selection.candidates.iter().find(|&&d| d > steps) {
            return Err(Error::invalid(format!("depth_selection.candidates: {d} exceeds {steps} schedule steps")));
        }
        if self.depth_selection.enabled && self.depth_selection.candidates.is_empty() {
            return Err(Error::invalid("depth_selection.candidates: empty while selection is enabled"));
        }
        if let Some(f) = self.depth_selection.fallback.filter(|&f| f > steps) {
            return Err(Error::invalid(format!("depth_selection.fallback: {f} exceeds {steps} schedule steps")));
        }
        let d = &self.diffusion;
        if d.tokens == 0 || d.channels == 0 || d.denoise_steps == 0 {
            return Err(Error::invalid("diffusion: tokens, channels and denoise_steps must be positive"));
        }
        Ok(())
    }

    /// Copy for embedding in reports: no output directory.
    pub fn echo(&self) -> RunConfig {
        RunConfig { output_dir: None, ..self.clone() }
    }
}

pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
