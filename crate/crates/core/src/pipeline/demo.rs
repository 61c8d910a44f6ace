use super::{Check, Command, PredictorKind, RunConfig, RunOutput, RunReport};
use crate::ddim::{
    articulate, invert, sample, ArticulateConfig, ArticulatePrompts, AttentionToyPredictor, CondRole, Conditioning,
    Latent, LinearPredictor, NoisePredictor, NoiseSchedule, StartMode, ZeroPredictor,
};
use crate::depthsel::{select_depth, DepthOutcome, DepthSearch};
use crate::error::{Error, Result};
use crate::io;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const ADJOINT_TOL: f64 = 1e-10;
const ROUND_TRIP_TOL: f64 = 1e-6;
const ROUND_TRIP_DEPTH: usize = 25;
const RESCALE_TOL: f64 = 1e-12;

fn max_abs_diff(a: &Latent, b: &Latent) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check(name: &str, value: f64, threshold: f64) -> Check {
    Check { name: name.into(), passed: value <= threshold, value, threshold }
}

fn predictor(cfg: &RunConfig, rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Result<Box<dyn NoisePredictor>> {
    let d = &cfg.diffusion;
    Ok(match d.predictor {
        PredictorKind::Zero => Box::new(ZeroPredictor { cond_dim: d.cond_dim }),
        PredictorKind::Linear => Box::new(LinearPredictor::random(rng, shape, d.cond_dim, d.linear_scale, d.linear_gain)?),
        PredictorKind::AttentionToy => {
            Box::new(AttentionToyPredictor::random(rng, d.channels, d.cond_dim, cfg.schedule.steps as f64)?)
        }
    })
}

fn choose_depth(
    cfg: &RunConfig,
    p: &dyn NoisePredictor,
    input: &Latent,
    prompts: &ArticulatePrompts,
    schedule: &NoiseSchedule,
    report: &mut RunReport,
) -> Result<usize> {
    let sel = &cfg.depth_selection;
    if !sel.enabled {
        return sel.fallback.ok_or_else(|| Error::invalid("depth_selection.fallback is required when selection is disabled"));
    }
    let search = DepthSearch {
        candidates: sel.candidates.clone(),
        guidance: cfg.guidance,
        denoise_steps: cfg.diffusion.denoise_steps,
        execution: cfg.execution,
    };
    let e_p = prompts.source.with_role(CondRole::Prompt);
    let e_null = prompts.empty.with_role(CondRole::Null);
    let result = select_depth(p, input, &e_p, &e_null, &search, schedule)?;
    let outcome = result.outcome;
    report.depth_selection = Some(result);
    match outcome {
        DepthOutcome::Selected { depth } => Ok(depth),
        DepthOutcome::NoSignal => sel.fallback.ok_or(Error::NoSignal),
    }
}

pub(super) fn run(cfg: &RunConfig, command: &Command) -> Result<RunOutput> {
    let schedule = cfg.schedule.build()?;
    let d = &cfg.diffusion;
    let shape = (cfg.views.count, d.tokens, d.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = predictor(cfg, &mut rng, shape)?;
    let input = Latent::from_shape_simple_fn(shape, || rng.sample(StandardNormal));
    let mut cond = |role| Conditioning::new(role, (0..d.cond_dim).map(|_| rng.sample(StandardNormal)).collect());
    let prompts = ArticulatePrompts {
        source: cond(CondRole::Original)?,
        empty: cond(CondRole::Empty)?,
        articulation: cond(CondRole::Articulation)?,
        negative: cond(CondRole::Negative)?,
    };

    let mut report = RunReport::new(command, cfg);
    let depth = choose_depth(cfg, p.as_ref(), &input, &prompts, &schedule, &mut report)?;
    report.inversion_depth = Some(depth);

    let inversion = invert(&input, p.as_ref(), &prompts.source, &prompts.empty, depth, cfg.guidance, &schedule)?;
    let art_cfg = ArticulateConfig { steps: d.denoise_steps, guidance: cfg.guidance, start: d.start };
    let out = articulate(&inversion, p.as_ref(), &prompts, &art_cfg, &schedule)?;

    let coincident = ArticulatePrompts {
        articulation: prompts.source.with_role(CondRole::Articulation),
        negative: prompts.empty.with_role(CondRole::Negative),
        ..prompts.clone()
    };
    let same_start = ArticulateConfig { start: StartMode::SameAsSource, ..art_cfg.clone() };
    let twin = articulate(&inversion, p.as_ref(), &coincident, &same_start, &schedule)?;

    report.checks.push(check("replay_adjointness", max_abs_diff(&inversion.replay_backward(&schedule)?, &input), ADJOINT_TOL));
    report.checks.push(check(
        "time_shifted_steps",
        (out.steps_executed as f64 - d.denoise_steps as f64).abs(),
        0.0,
    ));
    report.checks.push(check("coincident_frames", max_abs_diff(twin.articulated_final(), twin.source_final()), 0.0));
    match d.predictor {
        PredictorKind::Zero => {
            let k = (schedule.alpha_bar(depth as f64)? / schedule.alpha_bar(0.0)?).sqrt();
            report.checks.push(check("pure_rescaling", max_abs_diff(inversion.last(), &(&input * k)), RESCALE_TOL));
        }
        PredictorKind::Linear => {
            let depth = ROUND_TRIP_DEPTH.min(schedule.steps());
            let inv = invert(&input, p.as_ref(), &prompts.source, &prompts.empty, depth, cfg.guidance, &schedule)?;
            let back: Vec<f64> = (0..=depth).rev().map(|t| t as f64).collect();
            let rec = sample(inv.last(), p.as_ref(), &prompts.source, &prompts.empty, cfg.guidance, &back, &schedule)?;
            report.checks.push(check("linear_round_trip", max_abs_diff(rec.last(), &input), ROUND_TRIP_TOL));
        }
        PredictorKind::AttentionToy => {}
    }
    report.counts.insert("denoising_steps".into(), out.steps_executed);
    report.counts.insert("cached_attention_entries".into(), out.cache.len());

    let files = vec![
        ("inversion.json".to_string(), io::to_json(&inversion).into_bytes()),
        ("source.json".to_string(), io::to_json(&out.source).into_bytes()),
        ("articulation.json".to_string(), io::to_json(&out.articulation).into_bytes()),
    ];
    Ok(RunOutput { files, report })
}
