use super::Latent;
use crate::error::{Error, Result};
use crate::rsactrl::{joint_attention, rsactrl_attention, Qkv};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondRole {
    Original,
    Empty,
    Articulation,
    Negative,
    Prompt,
    Null,
}

/// Opaque conditioning vector with the slot it is meant for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub role: CondRole,
    pub embedding: Vec<f64>,
}

impl Conditioning {
    pub fn new(role: CondRole, embedding: Vec<f64>) -> Result<Self> {
        if !embedding.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid(format!("{role:?} conditioning has non-finite entries")));
        }
        Ok(Conditioning { role, embedding })
    }

    /// Same vector under a different slot tag.
    pub fn with_role(&self, role: CondRole) -> Self {
        Conditioning { role, embedding: self.embedding.clone() }
    }
}

/// Access to a predictor's attention layers during one call.
pub enum AttentionHook<'a> {
    Plain,
    /// Append each layer's Q/K/V, in layer order.
    Capture(&'a mut Vec<Qkv>),
    /// Replace each layer's plain attention with the rewired variant, using
    /// the given source-frame Q/K/V per layer.
    Rewire(&'a [Qkv]),
}

pub trait NoisePredictor: Send + Sync {
    fn name(&self) -> &str;

    fn cond_dim(&self) -> usize;

    fn attention_layers(&self) -> usize {
        0
    }

    fn predict(&self, z: &Latent, cond: &Conditioning, t: f64, hook: &mut AttentionHook<'_>) -> Result<Latent>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroPredictor {
    pub cond_dim: usize,
}

impl NoisePredictor for ZeroPredictor {
    fn name(&self) -> &str {
        "zero"
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn predict(&self, z: &Latent, _: &Conditioning, _: f64, _: &mut AttentionHook<'_>) -> Result<Latent> {
        Ok(Latent::zeros(z.dim()))
    }
}

/// Returns a fixed tensor whatever the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPredictor {
    pub output: Latent,
    pub cond_dim: usize,
}

impl NoisePredictor for ConstantPredictor {
    fn name(&self) -> &str {
        "constant"
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn predict(&self, z: &Latent, _: &Conditioning, _: f64, _: &mut AttentionHook<'_>) -> Result<Latent> {
        if z.dim() != self.output.dim() {
            return Err(Error::dim(format!("constant predictor holds {:?}, got {:?}", self.output.dim(), z.dim())));
        }
        Ok(self.output.clone())
    }
}

/// Timestep-dependent multiplier on the conditioning response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GainProfile {
    Constant { value: f64 },
    Gaussian { center: f64, width: f64, peak: f64 },
}

impl GainProfile {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            GainProfile::Constant { value } => value,
            GainProfile::Gaussian { center, width, peak } => {
                let u = (t - center) / width;
                peak * (-0.5 * u * u).exp()
            }
        }
    }
}

impl Default for GainProfile {
    fn default() -> Self {
        GainProfile::Constant { value: 1.0 }
    }
}

/// `ε̂ = A·vec(z) + g(t)·B·e` on a fixed latent shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    shape: (usize, usize, usize),
    a: Array2<f64>,
    b: Array2<f64>,
    gain: GainProfile,
}

impl LinearPredictor {
    pub fn new(shape: (usize, usize, usize), a: Array2<f64>, b: Array2<f64>, gain: GainProfile) -> Result<Self> {
        let len = shape.0 * shape.1 * shape.2;
        if len == 0 {
            return Err(Error::dim("empty latent shape"));
        }
        if a.dim() != (len, len) {
            return Err(Error::dim(format!("A is {:?}, expected {len}×{len}", a.dim())));
        }
        if b.nrows() != len {
            return Err(Error::dim(format!("B has {} rows, expected {len}", b.nrows())));
        }
        if !a.iter().chain(b.iter()).all(|x| x.is_finite()) {
            return Err(Error::invalid("linear predictor has non-finite coefficients"));
        }
        Ok(LinearPredictor { shape, a, b, gain })
    }

    /// Gaussian `A` with spectral norm of order `a_scale`, Gaussian `B` with
    /// unit-variance rows.
    pub fn random<R: Rng>(
        rng: &mut R,
        shape: (usize, usize, usize),
        cond_dim: usize,
        a_scale: f64,
        gain: GainProfile,
    ) -> Result<Self> {
        let len = shape.0 * shape.1 * shape.2;
        let sa = a_scale / (2.0 * (len as f64).sqrt());
        let sb = 1.0 / (cond_dim.max(1) as f64).sqrt();
        let a = Array2::from_shape_simple_fn((len, len), || sa * rng.sample::<f64, _>(StandardNormal));
        let b = Array2::from_shape_simple_fn((len, cond_dim), || sb * rng.sample::<f64, _>(StandardNormal));
        Self::new(shape, a, b, gain)
    }

    pub fn a(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn gain(&self) -> GainProfile {
        self.gain
    }
}

impl NoisePredictor for LinearPredictor {
    fn name(&self) -> &str {
        "linear"
    }

    fn cond_dim(&self) -> usize {
        self.b.ncols()
    }

    fn predict(&self, z: &Latent, cond: &Conditioning, t: f64, _: &mut AttentionHook<'_>) -> Result<Latent> {
        if z.dim() != self.shape {
            return Err(Error::dim(format!("linear predictor expects {:?}, got {:?}", self.shape, z.dim())));
        }
        let flat = z.iter().copied().collect::<Array1<f64>>();
        let e = Array1::from(cond.embedding.clone());
        let out = self.a.dot(&flat) + self.b.dot(&e) * self.gain.at(t);
        Ok(out.into_shape_with_order(self.shape).expect("length matches shape"))
    }
}

/// One conditioning/time projection followed by one multi-view attention
/// layer and an output projection.
///
/// Tokens are `X = z + W_e·e + (t / horizon)·τ`; attention uses
/// `Q = X·W_q`, `K = X·W_k`, `V = X·W_v`; the prediction is `O·W_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionToyPredictor {
    pub w_cond: Array2<f64>,
    pub time_embedding: Array1<f64>,
    pub horizon: f64,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

impl AttentionToyPredictor {
    pub fn random<R: Rng>(rng: &mut R, channels: usize, cond_dim: usize, horizon: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::dim("attention toy needs at least one channel"));
        }
        let mut mat = |r: usize, c: usize, s: f64| {
            Array2::from_shape_simple_fn((r, c), || s * rng.sample::<f64, _>(StandardNormal))
        };
        let s = 1.0 / (channels as f64).sqrt();
        let w_cond = mat(channels, cond_dim, 1.0 / (cond_dim.max(1) as f64).sqrt());
        let (w_q, w_k, w_v, w_o) = (mat(channels, channels, s), mat(channels, channels, s), mat(channels, channels, s), mat(channels, channels, s));
        let time_embedding = mat(1, channels, 1.0).row(0).to_owned();
        let p = AttentionToyPredictor { w_cond, time_embedding, horizon, w_q, w_k, w_v, w_o };
        p.check()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.w_q.nrows()
    }

    fn check(&self) -> Result<()> {
        let c = self.channels();
        for (name, m) in [("W_q", &self.w_q), ("W_k", &self.w_k), ("W_v", &self.w_v), ("W_o", &self.w_o)] {
            if m.dim() != (c, c) {
                return Err(Error::dim(format!("{name} is {:?}, expected {c}×{c}", m.dim())));
            }
        }
        if self.w_cond.nrows() != c || self.time_embedding.len() != c {
            return Err(Error::dim("conditioning projection and time embedding must match the channel count"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::invalid("time horizon must be positive"));
        }
        Ok(())
    }

    /// Input tokens `X` for a latent.
    pub fn tokens(&self, z: &Latent, cond: &Conditioning, t: f64) -> Array3<f64> {
        let bias = self.w_cond.dot(&Array1::from(cond.embedding.clone())) + &self.time_embedding * (t / self.horizon);
        z + &bias
    }

    pub fn qkv(&self, x: &Array3<f64>) -> Result<Qkv> {
        let proj = |w: &Array2<f64>| {
            let mut out = Array3::zeros(x.dim());
            for (mut o, xi) in out.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))) {
                o.assign(&xi.dot(w));
            }
            out
        };
        Qkv::new(proj(&self.w_q), proj(&self.w_k), proj(&self.w_v))
    }
}

impl NoisePredictor for AttentionToyPredictor {
    fn name(&self) -> &str {
        "attention-toy"
    }

    fn cond_dim(&self) -> usize {
        self.w_cond.ncols()
    }

    fn attention_layers(&self) -> usize {
        1
    }

    fn predict(&self, z: &Latent, cond: &Conditioning, t: f64, hook: &mut AttentionHook<'_>) -> Result<Latent> {
        if z.dim().2 != self.channels() {
            return Err(Error::dim(format!("attention toy has {} channels, latent has {}", self.channels(), z.dim().2)));
        }
        let qkv = self.qkv(&self.tokens(z, cond, t))?;
        let attended = match hook {
            AttentionHook::Plain => joint_attention(&qkv)?,
            AttentionHook::Capture(store) => {
                let out = joint_attention(&qkv)?;
                store.push(qkv);
                out
            }
            AttentionHook::Rewire(source) => {
                let src = source.first().ok_or_else(|| Error::invalid("rewire hook carries no layer 0"))?;
                rsactrl_attention(&qkv, src)?
            }
        };
        let mut out = Array3::zeros(z.dim());
        for (mut o, a) in out.axis_iter_mut(Axis(0)).zip(attended.axis_iter(Axis(0))) {
            o.assign(&a.dot(&self.w_o));
        }
        Ok(out)
    }
}
