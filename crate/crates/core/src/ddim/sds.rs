use super::{predict_checked, AttentionHook, Conditioning, Latent, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A map from parameters to a latent-shaped output.
pub trait DifferentiableRender {
    fn render(&self, theta: &[f64]) -> Result<Latent>;

    /// `∂vec(x)/∂θ` with one row per latent element, when available
    /// analytically. `None` falls back to central differences.
    fn jacobian(&self, _theta: &[f64]) -> Option<Result<Array2<f64>>> {
        None
    }
}

/// Timestep weighting `w(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weighting {
    Constant { value: f64 },
    OneMinusAlphaBar,
}

impl Weighting {
    pub fn at(&self, t: f64, schedule: &NoiseSchedule) -> Result<f64> {
        match *self {
            Weighting::Constant { value } => Ok(value),
            Weighting::OneMinusAlphaBar => Ok(1.0 - schedule.alpha_bar(t)?),
        }
    }
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Constant { value: 1.0 }
    }
}

const FD_STEP: f64 = 1e-6;

fn finite_difference_jacobian(render: &dyn DifferentiableRender, theta: &[f64], len: usize) -> Result<Array2<f64>> {
    let mut jac = Array2::zeros((len, theta.len()));
    let mut probe = theta.to_vec();
    for j in 0..theta.len() {
        let h = FD_STEP * theta[j].abs().max(1.0);
        probe[j] = theta[j] + h;
        let plus = render.render(&probe)?;
        probe[j] = theta[j] - h;
        let minus = render.render(&probe)?;
        probe[j] = theta[j];
        if plus.len() != len || minus.len() != len {
            return Err(Error::dim("render output changed size under perturbation"));
        }
        for (i, (p, m)) in plus.iter().zip(minus.iter()).enumerate() {
            jac[[i, j]] = (p - m) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Single-sample score-distillation gradient
/// `w(t)·(ε̂(x_t; y, t) − ε)ᵀ·∂x/∂θ` with `x_t = √ᾱ_t·x + √(1−ᾱ_t)·ε`.
#[allow(clippy::too_many_arguments)]
pub fn sds_gradient(
    theta: &[f64],
    render: &dyn DifferentiableRender,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    t: f64,
    noise: &Latent,
    weighting: Weighting,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let x = render.render(theta)?;
    if x.dim() != noise.dim() {
        return Err(Error::dim(format!("render {:?} vs noise {:?}", x.dim(), noise.dim())));
    }
    let a = schedule.alpha_bar(t)?;
    let w = weighting.at(t, schedule)?;
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    let x_t = ndarray::Zip::from(&x).and(noise).map_collect(|&x, &e| sa * x + sb * e);
    let eps_hat = predict_checked(predictor, &x_t, cond, t, &mut AttentionHook::Plain)?;

    let jac = match render.jacobian(theta) {
        Some(j) => j?,
        None => finite_difference_jacobian(render, theta, x.len())?,
    };
    if jac.dim() != (x.len(), theta.len()) {
        return Err(Error::dim(format!("Jacobian is {:?}, expected {:?}", jac.dim(), (x.len(), theta.len()))));
    }
    if let Some(((i, j), _)) = jac.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite Jacobian entry at output {i}, parameter {j}")));
    }
    let residual: ndarray::Array1<f64> = eps_hat.iter().zip(noise.iter()).map(|(p, e)| p - e).collect();
    Ok(jac.t().dot(&residual).iter().map(|g| w * g).collect())
}
