use super::*;
use approx::assert_abs_diff_eq;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Latent {
    Latent::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn cond(rng: &mut ChaCha8Rng, role: CondRole, dim: usize) -> Conditioning {
    Conditioning::new(role, (0..dim).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn max_abs_diff(a: &Latent, b: &Latent) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn default_schedule_shape() {
    let s = NoiseSchedule::default();
    assert_eq!(s.steps(), 50);
    assert_eq!(s.alphas_bar()[0], 1.0);
    assert!(s.alphas_bar().windows(2).all(|w| w[1] < w[0]));
    assert_abs_diff_eq!(s.alphas_bar()[1], 1.0 - 8.5e-4, epsilon = 1e-15);
    let last_beta = 1.0 - s.alphas_bar()[50] / s.alphas_bar()[49];
    assert_abs_diff_eq!(last_beta, 1.2e-2, epsilon = 1e-12);
}

#[test]
fn fractional_timesteps_interpolate() {
    let s = NoiseSchedule::default();
    for i in 0..=50 {
        assert_eq!(s.alpha_bar(i as f64).unwrap(), s.alphas_bar()[i]);
    }
    let mid = s.alpha_bar(12.5).unwrap();
    assert!(mid < s.alphas_bar()[12] && mid > s.alphas_bar()[13]);
    assert_abs_diff_eq!(mid, (s.alphas_bar()[12] * s.alphas_bar()[13]).sqrt(), epsilon = 1e-15);
    assert!(s.alpha_bar(-0.1).is_err());
    assert!(s.alpha_bar(50.01).is_err());
}

#[test]
fn rejects_bad_schedules() {
    assert!(NoiseSchedule::from_alphas_bar(vec![1.0, 1.0]).is_err());
    assert!(NoiseSchedule::from_alphas_bar(vec![1.0, 0.5, 0.6]).is_err());
    assert!(NoiseSchedule::from_alphas_bar(vec![1.2, 0.5]).is_err());
    assert!(NoiseSchedule::from_alphas_bar(vec![1.0, 0.0]).is_err());
    assert!(NoiseSchedule::from_alphas_bar(vec![1.0]).is_err());
    assert!(NoiseSchedule::linear(0, 1e-3, 1e-2).is_err());
    assert!(NoiseSchedule::linear(10, 1e-2, 1e-3).is_err());
}

#[test]
fn zero_noise_step_rescales() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = randn(&mut rng, (2, 3, 4));
    let out = ddim_step(&z, &Latent::zeros(z.dim()), 3.0, 9.0, &s).unwrap();
    let k = (s.alphas_bar()[9] / s.alphas_bar()[3]).sqrt();
    assert!(max_abs_diff(&out, &(&z * k)) < 1e-15);
}

#[test]
fn same_timestep_is_identity() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = randn(&mut rng, (2, 2, 2));
    let e = randn(&mut rng, (2, 2, 2));
    assert_eq!(ddim_step(&z, &e, 7.0, 7.0, &s).unwrap(), z);
}

#[test]
fn step_round_trip() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let z = randn(&mut rng, (3, 4, 2));
        let e = randn(&mut rng, (3, 4, 2));
        let t = rng.random_range(0.0..49.0);
        let t_next = rng.random_range(t..50.0);
        let fwd = ddim_step(&z, &e, t, t_next, &s).unwrap();
        let back = ddim_step(&fwd, &e, t_next, t, &s).unwrap();
        assert!(max_abs_diff(&back, &z) < 1e-10);
    }
    let z = randn(&mut rng, (1, 2, 2));
    assert!(ddim_step(&z, &randn(&mut rng, (1, 2, 3)), 0.0, 1.0, &s).is_err());
}

#[test]
fn guidance_shortcuts_and_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = LinearPredictor::random(&mut rng, (2, 2, 2), 3, 0.5, GainProfile::default()).unwrap();
    let z = randn(&mut rng, (2, 2, 2));
    let c = cond(&mut rng, CondRole::Original, 3);
    let u = cond(&mut rng, CondRole::Empty, 3);
    let ec = p.predict(&z, &c, 4.0, &mut AttentionHook::Plain).unwrap();
    let eu = p.predict(&z, &u, 4.0, &mut AttentionHook::Plain).unwrap();
    assert_eq!(guide(&p, &z, 4.0, &c, &u, 1.0).unwrap(), ec);
    assert_eq!(guide(&p, &z, 4.0, &c, &c.with_role(CondRole::Empty), 7.5).unwrap(), ec);
    let g = guide(&p, &z, 4.0, &c, &u, 7.5).unwrap();
    assert!(max_abs_diff(&g, &(&eu + &((&ec - &eu) * 7.5))) < 1e-12);
    let wrong = cond(&mut rng, CondRole::Original, 2);
    assert!(guide(&p, &z, 4.0, &wrong, &u, 7.5).is_err());
}

#[test]
fn depth_zero_inversion_is_input() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = randn(&mut rng, (2, 2, 2));
    let e = cond(&mut rng, CondRole::Original, 1);
    let traj = invert(&z, &ZeroPredictor { cond_dim: 1 }, &e, &e, 0, 7.5, &s).unwrap();
    assert_eq!(traj.latents, vec![z]);
    assert!(traj.noises.is_empty());
    assert_eq!(traj.timesteps, vec![0.0]);
}

#[test]
fn zero_predictor_inversion_rescales() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = randn(&mut rng, (2, 3, 2));
    let e = cond(&mut rng, CondRole::Original, 2);
    let traj = invert(&z, &ZeroPredictor { cond_dim: 2 }, &e, &e, 10, 7.5, &s).unwrap();
    assert_eq!(traj.steps(), 10);
    let k = (s.alphas_bar()[10] / s.alphas_bar()[0]).sqrt();
    assert!(max_abs_diff(traj.last(), &(&z * k)) < 1e-14);
    assert!(invert(&z, &ZeroPredictor { cond_dim: 2 }, &e, &e, 51, 7.5, &s).is_err());
}

#[test]
fn replay_recovers_input_for_nonlinear_predictor() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = AttentionToyPredictor::random(&mut rng, 4, 3, 50.0).unwrap();
    let z = randn(&mut rng, (3, 5, 4));
    let (c, u) = (cond(&mut rng, CondRole::Original, 3), cond(&mut rng, CondRole::Empty, 3));
    let traj = invert(&z, &p, &c, &u, 35, 7.5, &s).unwrap();
    assert!(traj.latents.iter().chain(&traj.noises).all(|l| l.dim() == z.dim()));
    assert!(max_abs_diff(&traj.replay_backward(&s).unwrap(), &z) < 1e-10);
}

#[test]
fn linear_round_trip() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = LinearPredictor::random(&mut rng, (2, 4, 3), 4, 1e-5, GainProfile::default()).unwrap();
    let z = randn(&mut rng, (2, 4, 3));
    let (c, u) = (cond(&mut rng, CondRole::Original, 4), cond(&mut rng, CondRole::Empty, 4));
    let inv = invert(&z, &p, &c, &u, 25, 7.5, &s).unwrap();
    let steps: Vec<f64> = (0..=25).rev().map(f64::from).collect();
    let rec = sample(inv.last(), &p, &c, &u, 7.5, &steps, &s).unwrap();
    assert!(max_abs_diff(rec.last(), &z) < 1e-6, "{}", max_abs_diff(rec.last(), &z));
}

#[test]
fn time_shifted_grid() {
    let ts = time_shifted_timesteps(20.0, 50);
    assert_eq!(ts.len(), 51);
    assert_eq!(ts[0], 20.0);
    assert_eq!(ts[50], 0.0);
    for w in ts.windows(2) {
        assert_abs_diff_eq!(w[0] - w[1], 0.4, epsilon = 1e-12);
    }
    assert!(time_shifted_timesteps(0.0, 50).iter().all(|&t| t == 0.0));
}

#[test]
fn trajectory_json_round_trip() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = LinearPredictor::random(&mut rng, (1, 2, 3), 2, 0.3, GainProfile::default()).unwrap();
    let z = randn(&mut rng, (1, 2, 3));
    let c = cond(&mut rng, CondRole::Original, 2);
    let traj = invert(&z, &p, &c, &c, 4, 7.5, &s).unwrap();
    let text = serde_json::to_string(&traj).unwrap();
    let back: DiffusionTrajectory = serde_json::from_str(&text).unwrap();
    assert_eq!(back, traj);
}

fn toy_prompts(rng: &mut ChaCha8Rng, dim: usize) -> ArticulatePrompts {
    ArticulatePrompts {
        source: cond(rng, CondRole::Original, dim),
        empty: cond(rng, CondRole::Empty, dim),
        articulation: cond(rng, CondRole::Articulation, dim),
        negative: cond(rng, CondRole::Negative, dim),
    }
}

#[test]
fn coincident_frames_reproduce_source() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = AttentionToyPredictor::random(&mut rng, 4, 3, 50.0).unwrap();
    let z = randn(&mut rng, (3, 4, 4));
    let mut prompts = toy_prompts(&mut rng, 3);
    prompts.articulation = prompts.source.with_role(CondRole::Articulation);
    prompts.negative = prompts.empty.with_role(CondRole::Negative);
    let inv = invert(&z, &p, &prompts.source, &prompts.empty, 30, 7.5, &s).unwrap();
    let out = articulate(&inv, &p, &prompts, &ArticulateConfig::default(), &s).unwrap();
    assert_eq!(out.articulated_final(), out.source_final());
    assert_eq!(out.articulation, out.source);
}

#[test]
fn always_runs_configured_steps() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = AttentionToyPredictor::random(&mut rng, 2, 2, 50.0).unwrap();
    let z = randn(&mut rng, (2, 2, 2));
    let prompts = toy_prompts(&mut rng, 2);
    for depth in [0, 1, 17, 50] {
        let inv = invert(&z, &p, &prompts.source, &prompts.empty, depth, 7.5, &s).unwrap();
        let out = articulate(&inv, &p, &prompts, &ArticulateConfig::default(), &s).unwrap();
        assert_eq!(out.steps_executed, 50);
        assert_eq!(out.cache.len(), 100);
        assert_eq!(out.articulation.timesteps[0], depth as f64);
    }
}

#[test]
fn independent_start_is_seeded() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = AttentionToyPredictor::random(&mut rng, 2, 2, 50.0).unwrap();
    let z = randn(&mut rng, (2, 3, 2));
    let prompts = toy_prompts(&mut rng, 2);
    let inv = invert(&z, &p, &prompts.source, &prompts.empty, 20, 7.5, &s).unwrap();
    let cfg = ArticulateConfig { start: StartMode::Independent { seed: 3 }, ..Default::default() };
    let a = articulate(&inv, &p, &prompts, &cfg, &s).unwrap();
    let b = articulate(&inv, &p, &prompts, &cfg, &s).unwrap();
    assert_eq!(a.articulation, b.articulation);
    assert_ne!(&a.articulation.latents[0], inv.last());
}

/// Claims two attention layers but only captures one.
struct ShortCapture(AttentionToyPredictor);

impl NoisePredictor for ShortCapture {
    fn name(&self) -> &str {
        "short"
    }

    fn cond_dim(&self) -> usize {
        self.0.cond_dim()
    }

    fn attention_layers(&self) -> usize {
        2
    }

    fn predict(&self, z: &Latent, c: &Conditioning, t: f64, hook: &mut AttentionHook<'_>) -> Result<Latent> {
        self.0.predict(z, c, t, hook)
    }
}

#[test]
fn missing_cache_is_reported() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = ShortCapture(AttentionToyPredictor::random(&mut rng, 2, 2, 50.0).unwrap());
    let z = randn(&mut rng, (2, 2, 2));
    let prompts = toy_prompts(&mut rng, 2);
    let inv = invert(&z, &p, &prompts.source, &prompts.empty, 5, 7.5, &s).unwrap();
    let err = articulate(&inv, &p, &prompts, &ArticulateConfig::default(), &s).unwrap_err();
    assert!(matches!(err, crate::Error::MissingCache { step: 0, pass: "cond", layer: 1 }), "{err}");
}

type Grid = Vec<Vec<Vec<f64>>>;

fn to_grid(a: &Latent) -> Grid {
    a.outer_iter().map(|v| v.outer_iter().map(|r| r.to_vec()).collect()).collect()
}

fn from_grid(g: &Grid) -> Latent {
    let (n, t, c) = (g.len(), g[0].len(), g[0][0].len());
    Latent::from_shape_fn((n, t, c), |(i, j, k)| g[i][j][k])
}

fn oracle_attend(q: &[f64], keys: &[&Vec<f64>], vals: &[&Vec<f64>]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let scores: Vec<f64> = keys.iter().map(|k| scale * q.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f64>()).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut out = vec![0.0; q.len()];
    for (wi, v) in w.iter().zip(vals) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += wi / total * x;
        }
    }
    out
}

fn oracle_matmul_rows(x: &Grid, w: &Array2<f64>) -> Grid {
    x.iter()
        .map(|view| {
            view.iter()
                .map(|row| (0..w.ncols()).map(|col| (0..row.len()).map(|k| row[k] * w[[k, col]]).sum()).collect())
                .collect()
        })
        .collect()
}

struct OracleQkv {
    q: Grid,
    k: Grid,
    v: Grid,
}

fn oracle_qkv(p: &AttentionToyPredictor, z: &Grid, e: &[f64], t: f64) -> OracleQkv {
    let c = p.channels();
    let bias: Vec<f64> = (0..c)
        .map(|ch| (0..e.len()).map(|j| p.w_cond[[ch, j]] * e[j]).sum::<f64>() + p.time_embedding[ch] * t / p.horizon)
        .collect();
    let x: Grid = z.iter().map(|v| v.iter().map(|r| r.iter().zip(&bias).map(|(a, b)| a + b).collect()).collect()).collect();
    OracleQkv { q: oracle_matmul_rows(&x, &p.w_q), k: oracle_matmul_rows(&x, &p.w_k), v: oracle_matmul_rows(&x, &p.w_v) }
}

fn oracle_joint(p: &AttentionToyPredictor, f: &OracleQkv) -> Grid {
    let keys: Vec<&Vec<f64>> = f.k.iter().flatten().collect();
    let vals: Vec<&Vec<f64>> = f.v.iter().flatten().collect();
    let o: Grid = f.q.iter().map(|v| v.iter().map(|q| oracle_attend(q, &keys, &vals)).collect()).collect();
    oracle_matmul_rows(&o, &p.w_o)
}

fn oracle_rewired(p: &AttentionToyPredictor, art: &OracleQkv, src: &OracleQkv) -> Grid {
    let n = art.q.len();
    let o: Grid = (0..n)
        .map(|view| {
            let mut keys = Vec::new();
            let mut vals = Vec::new();
            for i in 0..n {
                let (kf, vf) = if i == view { (&src.k, &src.v) } else { (&art.k, &art.v) };
                keys.extend(kf[i].iter());
                vals.extend(vf[i].iter());
            }
            art.q[view].iter().map(|q| oracle_attend(q, &keys, &vals)).collect()
        })
        .collect();
    oracle_matmul_rows(&o, &p.w_o)
}

fn oracle_step(z: &Grid, eps: &Grid, t: f64, t_next: f64, s: &NoiseSchedule) -> Grid {
    let (a, an) = (s.alpha_bar(t).unwrap(), s.alpha_bar(t_next).unwrap());
    z.iter()
        .zip(eps)
        .map(|(zv, ev)| {
            zv.iter()
                .zip(ev)
                .map(|(zr, er)| {
                    zr.iter()
                        .zip(er)
                        .map(|(&z, &e)| an.sqrt() * (z - (1.0 - a).sqrt() * e) / a.sqrt() + (1.0 - an).sqrt() * e)
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn oracle_cfg(u: &Grid, c: &Grid, w: f64) -> Grid {
    u.iter()
        .zip(c)
        .map(|(uv, cv)| uv.iter().zip(cv).map(|(ur, cr)| ur.iter().zip(cr).map(|(u, c)| u + w * (c - u)).collect()).collect())
        .collect()
}

#[test]
fn articulation_matches_hand_assembled_oracle() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = AttentionToyPredictor::random(&mut rng, 3, 2, 50.0).unwrap();
    let z = randn(&mut rng, (2, 4, 3));
    let prompts = toy_prompts(&mut rng, 2);
    let inv = invert(&z, &p, &prompts.source, &prompts.empty, 20, 7.5, &s).unwrap();
    let out = articulate(&inv, &p, &prompts, &ArticulateConfig::default(), &s).unwrap();

    let ts = time_shifted_timesteps(20.0, 50);
    let mut zs = to_grid(inv.last());
    let mut za = zs.clone();
    for w in ts.windows(2) {
        let (t, tn) = (w[0], w[1]);
        let src_c = oracle_qkv(&p, &zs, &prompts.source.embedding, t);
        let src_u = oracle_qkv(&p, &zs, &prompts.empty.embedding, t);
        let eps_s = oracle_cfg(&oracle_joint(&p, &src_u), &oracle_joint(&p, &src_c), 7.5);
        let art_c = oracle_qkv(&p, &za, &prompts.articulation.embedding, t);
        let art_u = oracle_qkv(&p, &za, &prompts.negative.embedding, t);
        let eps_a = oracle_cfg(&oracle_rewired(&p, &art_u, &src_u), &oracle_rewired(&p, &art_c, &src_c), 7.5);
        zs = oracle_step(&zs, &eps_s, t, tn, &s);
        za = oracle_step(&za, &eps_a, t, tn, &s);
    }
    assert!(max_abs_diff(out.source_final(), &from_grid(&zs)) < 1e-9);
    assert!(max_abs_diff(out.articulated_final(), &from_grid(&za)) < 1e-9);
    assert!(max_abs_diff(out.articulated_final(), out.source_final()) > 1e-6);
}

struct Ray {
    u: Latent,
}

impl DifferentiableRender for Ray {
    fn render(&self, theta: &[f64]) -> Result<Latent> {
        Ok(&self.u * theta[0])
    }
}

struct AnalyticRay(Ray);

impl DifferentiableRender for AnalyticRay {
    fn render(&self, theta: &[f64]) -> Result<Latent> {
        self.0.render(theta)
    }

    fn jacobian(&self, _: &[f64]) -> Option<Result<Array2<f64>>> {
        let col: Array1<f64> = self.0.u.iter().copied().collect();
        Some(Ok(col.insert_axis(ndarray::Axis(1))))
    }
}

#[test]
fn sds_fixed_point_and_zero_weight() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let eps = randn(&mut rng, (2, 2, 2));
    let p = ConstantPredictor { output: eps.clone(), cond_dim: 1 };
    let ray = Ray { u: randn(&mut rng, (2, 2, 2)) };
    let c = cond(&mut rng, CondRole::Prompt, 1);
    let g = sds_gradient(&[0.7], &ray, &p, &c, 13.0, &eps, Weighting::default(), &s).unwrap();
    assert_eq!(g, vec![0.0]);

    let other = ConstantPredictor { output: randn(&mut rng, (2, 2, 2)), cond_dim: 1 };
    let g = sds_gradient(&[0.7], &ray, &other, &c, 0.0, &eps, Weighting::OneMinusAlphaBar, &s).unwrap();
    assert_eq!(g, vec![0.0]);
    let g = sds_gradient(&[0.7], &ray, &other, &c, 5.0, &eps, Weighting::Constant { value: 0.0 }, &s).unwrap();
    assert_eq!(g, vec![0.0]);
}

#[test]
fn sds_matches_surrogate_finite_difference() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let d = randn(&mut rng, (1, 3, 2));
    let eps = randn(&mut rng, (1, 3, 2));
    let u = randn(&mut rng, (1, 3, 2));
    let p = ConstantPredictor { output: d.clone(), cond_dim: 0 };
    let c = Conditioning::new(CondRole::Prompt, vec![]).unwrap();
    let t = 31.0;
    let weighting = Weighting::OneMinusAlphaBar;
    let w = weighting.at(t, &s).unwrap();
    let surrogate = |theta: f64| w * (&d - &eps).iter().zip((&u * theta).iter()).map(|(a, b)| a * b).sum::<f64>();
    let h = 1e-5;
    let fd = (surrogate(0.4 + h) - surrogate(0.4 - h)) / (2.0 * h);
    let numeric = sds_gradient(&[0.4], &Ray { u: u.clone() }, &p, &c, t, &eps, weighting, &s).unwrap();
    let analytic = sds_gradient(&[0.4], &AnalyticRay(Ray { u }), &p, &c, t, &eps, weighting, &s).unwrap();
    assert_abs_diff_eq!(numeric[0], fd, epsilon = 1e-7);
    assert_abs_diff_eq!(analytic[0], fd, epsilon = 1e-7);
}

struct Blowup;

impl DifferentiableRender for Blowup {
    fn render(&self, theta: &[f64]) -> Result<Latent> {
        Ok(Latent::from_elem((1, 1, 1), theta[0]))
    }

    fn jacobian(&self, _: &[f64]) -> Option<Result<Array2<f64>>> {
        Some(Ok(Array2::from_elem((1, 1), f64::NAN)))
    }
}

#[test]
fn sds_rejects_non_finite_jacobian() {
    let s = NoiseSchedule::default();
    let p = ZeroPredictor { cond_dim: 0 };
    let c = Conditioning::new(CondRole::Prompt, vec![]).unwrap();
    let eps = Latent::from_elem((1, 1, 1), 0.3);
    assert!(sds_gradient(&[1.0], &Blowup, &p, &c, 3.0, &eps, Weighting::default(), &s).is_err());
}
